use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, Positional};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::heads::{self, ClassScoreMatrix, HeadConfig, MaskMatrix};
use crate::nn::{self, BlockDims, Ctx};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of snippets `T` per video after resampling.
    pub t_len: usize,
    /// Number of action classes `K` (background is class `K + 1`).
    pub num_classes: usize,
    /// Input feature rows `2d`.
    pub input_dim: usize,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    /// Tiny configuration for unit tests.
    pub fn toy(num_classes: usize, t_len: usize, input_dim: usize) -> Self {
        Self {
            t_len,
            num_classes,
            input_dim,
            encoder: EncoderConfig {
                embed_dim: 8,
                heads: 2,
                layers: 1,
                ff_dim: 16,
                refine_dim: 4,
                class_proj_dim: 4,
                refine_kernel: 3,
                class_proj_kernel: 1,
                dropout: 0.0,
                positional: Positional::None,
            },
            heads: HeadConfig {
                class_kernel: 3,
                mask_kernels: [3, 3, 1],
                mask_hidden: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(config_err("t_len must be >= 2"));
        }
        if self.num_classes == 0 || self.input_dim == 0 || !self.input_dim.is_multiple_of(2) {
            return Err(config_err("num_classes must be >= 1 and input_dim a positive even number"));
        }
        self.encoder.validate()?;
        self.heads.validate()
    }

    fn position_dims(&self) -> BlockDims {
        BlockDims {
            dropout: 0.0,
            ..self.encoder.block_dims()
        }
    }
}

/// All graph nodes of one forward pass, in `T x *` layout.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub embedding: Var,
    /// `E_m`, `T x C_m`.
    pub refine_proj: Var,
    /// `E_p`, `T x C_p`.
    pub class_proj: Var,
    pub class_logits: Var,
    pub class_probs: Var,
    /// Anchor-major mask logits: row `t` is `H_m(E)` for anchor `t`.
    pub mask_logits: Var,
    pub mask: Var,
    /// Feature reconstruction, `T x 2d`.
    pub recon: Var,
}

/// Inference results in column-per-snippet orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ClassScoreMatrix,
    pub masks: MaskMatrix,
    /// `(K + 1) x T`
    pub class_logits: Mat,
    /// `T x T`, same orientation as `masks`.
    pub mask_logits: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TadModel {
    cfg: ModelConfig,
    params: ParamStore,
}

impl TadModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = cfg.encoder.embed_dim;
        encoder::init(&mut params, &cfg.encoder, cfg.input_dim, cfg.t_len, &mut rng);
        heads::init(&mut params, &cfg.heads, c, cfg.num_classes, cfg.t_len, &mut rng);
        nn::init_linear(&mut params, "rec", c, cfg.input_dim, &mut rng);
        params.init_normal("pos_head.pos", (cfg.t_len, c), 0.02, &mut rng);
        nn::init_transformer_block(&mut params, "pos_head.blk", cfg.position_dims(), &mut rng);
        nn::init_linear(&mut params, "pos_head.out", c, cfg.t_len, &mut rng);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg.clone(), 0)?;
        for (name, value) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.dim() == value.dim() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("parameter `{name}` missing"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Re-initializes the classification stream (used when fine-tuning from a
    /// pre-trained checkpoint, which never trains it).
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        heads::init_classifier(
            &mut self.params,
            &self.cfg.heads,
            self.cfg.encoder.embed_dim,
            self.cfg.num_classes,
            &mut rng,
        );
    }

    /// Full forward pass; `x` is the `T x 2d` feature input.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Outputs {
        let store = &self.params;
        let embedding = encoder::embed_graph(g, store, &self.cfg.encoder, x, ctx);
        let (refine_proj, class_proj) = encoder::project_graph(g, store, &self.cfg.encoder, embedding);
        let class_logits = heads::class_logits_graph(g, store, &self.cfg.heads, embedding);
        let class_probs = g.softmax_rows(class_logits);
        let mask_logits = heads::mask_logits_graph(g, store, &self.cfg.heads, embedding);
        let mask = g.sigmoid(mask_logits);
        let recon = nn::linear(g, store, "rec", embedding);
        Outputs {
            embedding,
            refine_proj,
            class_proj,
            class_logits,
            class_probs,
            mask_logits,
            mask,
            recon,
        }
    }

    /// Encoder pass only: `E` as `T x C`.
    pub fn embed_graph(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Var {
        encoder::embed_graph(g, &self.params, &self.cfg.encoder, x, ctx)
    }

    /// Anchor-major mask probabilities from an embedding.
    pub fn mask_graph(&self, g: &mut Graph, e: Var) -> Var {
        let logits = heads::mask_logits_graph(g, &self.params, &self.cfg.heads, e);
        g.sigmoid(logits)
    }

    /// Feature reconstruction (`T x 2d`) from an embedding.
    pub fn reconstruct_graph(&self, g: &mut Graph, e: Var) -> Var {
        nn::linear(g, &self.params, "rec", e)
    }

    /// Position-classification logits (`T x T`) for a shuffled embedding sequence.
    pub fn position_logits(&self, g: &mut Graph, shuffled: Var, ctx: &mut Ctx) -> Var {
        let pos = g.param(&self.params, "pos_head.pos");
        let h = g.add(shuffled, pos);
        let h = nn::transformer_block(g, &self.params, "pos_head.blk", h, self.cfg.position_dims(), ctx);
        nn::linear(g, &self.params, "pos_head.out", h)
    }

    /// Inference on resampled features `F` (`2d x T`).
    pub fn predict(&self, f: &Mat) -> Result<Prediction> {
        if f.dim() != (self.cfg.input_dim, self.cfg.t_len) {
            return Err(Error::Shape(format!(
                "expected features of shape {:?}, got {:?}",
                (self.cfg.input_dim, self.cfg.t_len),
                f.dim()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input feature".into()));
        }
        let mut g = Graph::new();
        let x = g.leaf(f.t().to_owned());
        let out = self.forward(&mut g, x, &mut Ctx::eval());
        Ok(Prediction {
            probs: ClassScoreMatrix::new(g.value(out.class_probs).t().to_owned())?,
            masks: MaskMatrix::new(g.value(out.mask).t().to_owned())?,
            class_logits: g.value(out.class_logits).t().to_owned(),
            mask_logits: g.value(out.mask_logits).t().to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_shapes() {
        let model = TadModel::new(ModelConfig::toy(3, 10, 4), 0).unwrap();
        let f = Mat::from_shape_fn((4, 10), |(r, c)| (r * 10 + c) as f64 * 0.01);
        let p = model.predict(&f).unwrap();
        assert_eq!(p.probs.values().dim(), (4, 10));
        assert_eq!(p.masks.values().dim(), (10, 10));
        assert!(model.predict(&Mat::zeros((4, 9))).is_err());
    }

    #[test]
    fn checkpoint_restores_model() {
        let model = TadModel::new(ModelConfig::toy(2, 6, 4), 4).unwrap();
        let mut buf = Vec::new();
        model.params().write_to(&mut buf).unwrap();
        let store = ParamStore::read_from(buf.as_slice()).unwrap();
        let back = TadModel::from_params(model.config().clone(), store).unwrap();
        let f = Mat::from_elem((4, 6), 0.3);
        let a = model.predict(&f).unwrap();
        let b = back.predict(&f).unwrap();
        for (x, y) in a.masks.values().iter().zip(b.masks.values()) {
            assert!((x - y).abs() < 1e-5);
        }
        let wrong = TadModel::new(ModelConfig::toy(3, 6, 4), 0).unwrap();
        assert!(TadModel::from_params(wrong.config().clone(), model.params().clone()).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ModelConfig::toy(2, 6, 4);
        cfg.encoder.heads = 3;
        assert!(TadModel::new(cfg, 0).is_err());
    }
}
