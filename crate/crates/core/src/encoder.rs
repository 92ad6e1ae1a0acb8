//! Snippet embedding: a multi-head self-attention encoder over the feature
//! sequence, plus the 1-D convolution projections used by boundary refinement.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::model::TadModel;
use crate::nn::{self, BlockDims, Ctx};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    None,
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Embedding width `C`.
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Width `C_m` of the refinement projection `E_m`.
    pub refine_dim: usize,
    /// Width `C_p` of the classification-side projection `E_p`.
    pub class_proj_dim: usize,
    pub refine_kernel: usize,
    pub class_proj_kernel: usize,
    pub dropout: f64,
    pub positional: Positional,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            heads: 4,
            layers: 3,
            ff_dim: 512,
            refine_dim: 64,
            class_proj_dim: 64,
            refine_kernel: 3,
            class_proj_kernel: 1,
            dropout: 0.1,
            positional: Positional::None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(config_err("encoder dimensions must be >= 1"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.refine_dim == 0 || self.class_proj_dim == 0 {
            return Err(config_err("projection dimensions must be >= 1"));
        }
        if self.refine_dim != self.class_proj_dim {
            return Err(config_err(
                "refine_dim and class_proj_dim must match: refinement compares E_m and E_p columns",
            ));
        }
        if self.refine_kernel.is_multiple_of(2) || self.class_proj_kernel.is_multiple_of(2) {
            return Err(config_err("projection kernels must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub(crate) fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }
}

/// Snippet embedding `E`, stored as `(C, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    values: Mat,
}

impl EmbeddingSequence {
    pub fn new(values: Mat) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

pub(crate) fn init<R: rand::Rng>(store: &mut ParamStore, cfg: &EncoderConfig, input_dim: usize, t_len: usize, rng: &mut R) {
    nn::init_linear(store, "enc.in", input_dim, cfg.embed_dim, rng);
    if cfg.positional == Positional::Learned {
        store.init_normal("enc.pos", (t_len, cfg.embed_dim), 0.02, rng);
    }
    for l in 0..cfg.layers {
        nn::init_transformer_block(store, &format!("enc.l{l}"), cfg.block_dims(), rng);
    }
    nn::init_conv(store, "proj.m", cfg.embed_dim, cfg.refine_dim, cfg.refine_kernel, rng);
    nn::init_conv(store, "proj.p", cfg.embed_dim, cfg.class_proj_dim, cfg.class_proj_kernel, rng);
}

/// `x` is `T x 2d`; returns `E` as `T x C`.
pub(crate) fn embed_graph(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, x: Var, ctx: &mut Ctx) -> Var {
    let mut h = nn::linear(g, store, "enc.in", x);
    match cfg.positional {
        Positional::None => {}
        Positional::Learned => {
            let pos = g.param(store, "enc.pos");
            h = g.add(h, pos);
        }
        Positional::Sinusoidal => {
            let (t, c) = g.shape(h);
            let pos = g.leaf(nn::sinusoidal_positions(t, c));
            h = g.add(h, pos);
        }
    }
    for l in 0..cfg.layers {
        h = nn::transformer_block(g, store, &format!("enc.l{l}"), h, cfg.block_dims(), ctx);
    }
    h
}

/// Returns `(E_m, E_p)`, each `T x C_*`.
pub(crate) fn project_graph(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, e: Var) -> (Var, Var) {
    let em = nn::conv1d(g, store, "proj.m", e, cfg.refine_kernel);
    let ep = nn::conv1d(g, store, "proj.p", e, cfg.class_proj_kernel);
    (em, ep)
}

fn check_input(model: &TadModel, f: &Mat) -> Result<()> {
    if f.nrows() != model.config().input_dim {
        return Err(Error::Shape(format!(
            "expected {} feature rows, got {}",
            model.config().input_dim,
            f.nrows()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input feature".into()));
    }
    Ok(())
}

/// Inference-mode embedding of `F` (`2d x T`), returned as `C x T`.
pub fn embed(model: &TadModel, f: &Mat) -> Result<EmbeddingSequence> {
    check_input(model, f)?;
    let mut g = Graph::new();
    let x = g.leaf(f.t().to_owned());
    let e = embed_graph(&mut g, model.params(), &model.config().encoder, x, &mut Ctx::eval());
    EmbeddingSequence::new(g.value(e).t().to_owned())
}

/// Projections `(E_m, E_p)` of an embedding, each `C_* x T`.
pub fn project(model: &TadModel, e: &EmbeddingSequence) -> Result<(Mat, Mat)> {
    let cfg = &model.config().encoder;
    if e.dim() != cfg.embed_dim {
        return Err(Error::Shape(format!("expected embedding width {}, got {}", cfg.embed_dim, e.dim())));
    }
    let mut g = Graph::new();
    let x = g.leaf(e.values().t().to_owned());
    let (em, ep) = project_graph(&mut g, model.params(), cfg, x);
    Ok((g.value(em).t().to_owned(), g.value(ep).t().to_owned()))
}
