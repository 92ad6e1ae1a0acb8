//! The two parallel output streams on top of the shared embedding: snippet
//! classification and per-anchor temporal masks. Neither stream reads the
//! other's output.

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingSequence;
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::model::TadModel;
use crate::nn;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub class_kernel: usize,
    pub mask_kernels: [usize; 3],
    pub mask_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            class_kernel: 3,
            mask_kernels: [3, 3, 1],
            mask_hidden: 256,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_kernel.is_multiple_of(2) || self.mask_kernels.iter().any(|k| k % 2 == 0) {
            return Err(config_err("head kernels must be odd"));
        }
        if self.mask_hidden == 0 {
            return Err(config_err("mask_hidden must be >= 1"));
        }
        Ok(())
    }

    /// Half-width of the mask stream's receptive field along the snippet axis.
    pub fn mask_reach(&self) -> usize {
        self.mask_kernels.iter().map(|k| k / 2).sum()
    }
}

/// `P`, shape `(K + 1, T)`; every column is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreMatrix {
    values: Mat,
}

impl ClassScoreMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        for (t, col) in values.columns().into_iter().enumerate() {
            let s: f64 = col.sum();
            if (s - 1.0).abs() > 1e-5 || col.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Numeric(format!("column {t} is not on the simplex (sum {s})")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Highest action-class probability at `t` and its class index (1-based).
    pub fn best_action(&self, t: usize) -> (usize, f64) {
        let k = self.num_classes();
        (0..k)
            .map(|c| (c + 1, self.values[[c, t]]))
            .fold((1, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
    }

    pub fn background(&self, t: usize) -> f64 {
        self.values[[self.num_classes(), t]]
    }
}

/// `M`, shape `(T, T)`; entry `(i, t)` is the foreground probability of snippet
/// `i` predicted from anchor snippet `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    values: Mat,
}

impl MaskMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Shape(format!("mask matrix must be square, got {:?}", values.dim())));
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Numeric("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn column(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(t)
    }
}

pub(crate) fn init<R: rand::Rng>(
    store: &mut ParamStore,
    cfg: &HeadConfig,
    embed_dim: usize,
    num_classes: usize,
    t_len: usize,
    rng: &mut R,
) {
    init_classifier(store, cfg, embed_dim, num_classes, rng);
    let [k1, k2, k3] = cfg.mask_kernels;
    nn::init_conv(store, "mask.c1", embed_dim, cfg.mask_hidden, k1, rng);
    nn::init_conv(store, "mask.c2", cfg.mask_hidden, cfg.mask_hidden, k2, rng);
    nn::init_conv(store, "mask.c3", cfg.mask_hidden, t_len, k3, rng);
}

pub(crate) fn init_classifier<R: rand::Rng>(
    store: &mut ParamStore,
    cfg: &HeadConfig,
    embed_dim: usize,
    num_classes: usize,
    rng: &mut R,
) {
    nn::init_conv(store, "cls", embed_dim, num_classes + 1, cfg.class_kernel, rng);
}

/// Classification logits, `T x (K + 1)`.
pub fn class_logits_graph(g: &mut Graph, store: &ParamStore, cfg: &HeadConfig, e: Var) -> Var {
    nn::conv1d(g, store, "cls", e, cfg.class_kernel)
}

/// Mask logits in anchor-major layout: row `t` is anchor `t`'s mask over all
/// snippets (i.e. the transpose of `M`).
pub fn mask_logits_graph(g: &mut Graph, store: &ParamStore, cfg: &HeadConfig, e: Var) -> Var {
    let [k1, k2, k3] = cfg.mask_kernels;
    let h = nn::conv1d(g, store, "mask.c1", e, k1);
    let h = g.relu(h);
    let h = nn::conv1d(g, store, "mask.c2", h, k2);
    let h = g.relu(h);
    nn::conv1d(g, store, "mask.c3", h, k3)
}

fn embedding_input(model: &TadModel, e: &EmbeddingSequence, g: &mut Graph) -> Result<Var> {
    if e.dim() != model.config().encoder.embed_dim {
        return Err(Error::Shape(format!(
            "expected embedding width {}, got {}",
            model.config().encoder.embed_dim,
            e.dim()
        )));
    }
    if e.len() != model.config().t_len {
        return Err(Error::Shape(format!("expected {} snippets, got {}", model.config().t_len, e.len())));
    }
    Ok(g.leaf(e.values().t().to_owned()))
}

/// `P = softmax(H_c(E))`.
pub fn classify(model: &TadModel, e: &EmbeddingSequence) -> Result<ClassScoreMatrix> {
    let mut g = Graph::new();
    let x = embedding_input(model, e, &mut g)?;
    let logits = class_logits_graph(&mut g, model.params(), &model.config().heads, x);
    let p = g.softmax_rows(logits);
    ClassScoreMatrix::new(g.value(p).t().to_owned())
}

/// `M = sigmoid(H_m(E))`.
pub fn predict_masks(model: &TadModel, e: &EmbeddingSequence) -> Result<MaskMatrix> {
    let mut g = Graph::new();
    let x = embedding_input(model, e, &mut g)?;
    let logits = mask_logits_graph(&mut g, model.params(), &model.config().heads, x);
    let m = g.sigmoid(logits);
    MaskMatrix::new(g.value(m).t().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TadModel, EmbeddingSequence) {
        let cfg = ModelConfig::toy(2, 8, 6);
        let model = TadModel::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = model.config().encoder.embed_dim;
        let e = EmbeddingSequence::new(Mat::from_shape_fn((c, 8), |_| rng.gen_range(-1.0..1.0))).unwrap();
        (model, e)
    }

    #[test]
    fn class_columns_are_distributions() {
        let (model, e) = setup();
        let p = classify(&model, &e).unwrap();
        assert_eq!(p.values().dim(), (3, 8));
        for col in p.values().columns() {
            assert!((col.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_uniform_and_half() {
        let (mut model, e) = setup();
        let zero = |m: &Mat| Mat::zeros(m.dim());
        for name in ["cls.w", "mask.c3.w"] {
            let z = zero(model.params().get(name).unwrap());
            model.params_mut().insert(name, z);
        }
        let p = classify(&model, &e).unwrap();
        assert!(p.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        let m = predict_masks(&model, &e).unwrap();
        assert_eq!(m.values().dim(), (8, 8));
        assert!(m.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn crafted_logits_softmax() {
        let mut g = Graph::new();
        let x = g.leaf(ndarray::array![[2f64.ln(), 0.0, 0.0]]);
        let p = g.softmax_rows(x);
        let v = g.value(p);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((v[[0, 2]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates() {
        assert!((crate::graph::sigmoid(20.0) - 1.0).abs() < 1e-8);
        assert!(crate::graph::sigmoid(-20.0) < 1e-8);
    }

    #[test]
    fn mask_receptive_field() {
        let (model, e) = setup();
        let base = predict_masks(&model, &e).unwrap();
        let reach = model.config().heads.mask_reach();
        for t in 0..8 {
            let mut v = e.values().clone();
            v.column_mut(t).mapv_inplace(|x| x + 0.5);
            let moved = predict_masks(&model, &EmbeddingSequence::new(v).unwrap()).unwrap();
            for anchor in 0..8 {
                let changed = (0..8).any(|i| moved.values()[[i, anchor]] != base.values()[[i, anchor]]);
                let inside = anchor + reach >= t && anchor <= t + reach;
                assert_eq!(changed, inside, "t={t} anchor={anchor}");
            }
        }
    }

    #[test]
    fn streams_are_independent() {
        let (mut model, e) = setup();
        let p0 = classify(&model, &e).unwrap();
        let m0 = predict_masks(&model, &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for name in ["cls.w", "cls.b"] {
            let shape = model.params().get(name).unwrap().dim();
            model.params_mut().insert(name, Mat::from_shape_fn(shape, |_| rng.gen_range(-9.0..9.0)));
        }
        assert_eq!(predict_masks(&model, &e).unwrap(), m0);
        assert_ne!(classify(&model, &e).unwrap(), p0);
    }
}
