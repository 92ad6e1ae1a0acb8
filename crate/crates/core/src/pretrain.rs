//! Stage-I self-supervised pretext task: a random foreground span is kept and
//! the rest zeroed, the sequence is shuffled, and the model predicts the span
//! mask, the original slot positions, and the unmasked features.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{logsumexp_rows, Graph, Mat, Var};
use crate::losses::{self, MaskLossConfig};
use crate::model::TadModel;
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::train;

/// One pretext example built from features `F` (`2d x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    /// `F` with every column outside `[start, end)` zeroed (unshuffled).
    pub masked_features: Mat,
    pub start: usize,
    pub end: usize,
    /// Slot `i` of the shuffled sequence holds snippet `shuffle_perm[i]`.
    pub shuffle_perm: Vec<usize>,
    /// Position class of each shuffled slot; equals `shuffle_perm`.
    pub position_targets: Vec<usize>,
    pub recon_target: Mat,
}

impl PretextSample {
    pub fn len(&self) -> usize {
        self.masked_features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indicator of the kept span.
    pub fn foreground(&self) -> Vec<f64> {
        (0..self.len()).map(|i| if (self.start..self.end).contains(&i) { 1.0 } else { 0.0 }).collect()
    }

    /// Masked features after shuffling, `2d x T`.
    pub fn shuffled_features(&self) -> Mat {
        let f = &self.masked_features;
        Mat::from_shape_fn(f.dim(), |(r, i)| f[[r, self.shuffle_perm[i]]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextLossWeights {
    pub recon: f64,
    pub position: f64,
}

impl Default for PretextLossWeights {
    fn default() -> Self {
        Self {
            recon: 0.8,
            position: 0.4,
        }
    }
}

/// Samples a span whose length fraction is uniform in `[min_frac, max_frac]`
/// (rounded to whole snippets, at least one), masks, then shuffles.
pub fn make_pretext_sample<R: Rng>(f: &Mat, rng: &mut R, min_frac: f64, max_frac: f64) -> PretextSample {
    let t = f.ncols();
    let frac = if max_frac > min_frac {
        rng.gen_range(min_frac..=max_frac)
    } else {
        min_frac
    };
    let len = ((frac * t as f64).round() as usize).clamp(1, t);
    let start = rng.gen_range(0..=t - len);
    let end = start + len;
    let mut masked = f.clone();
    for i in (0..start).chain(end..t) {
        masked.column_mut(i).fill(0.0);
    }
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(rng);
    PretextSample {
        masked_features: masked,
        start,
        end,
        position_targets: perm.clone(),
        shuffle_perm: perm,
        recon_target: f.clone(),
    }
}

/// Graph nodes of one pretext pass.
#[derive(Debug, Clone, Copy)]
pub struct PretextOutputs {
    pub embedding: Var,
    /// Anchor-major mask probabilities, `T x T`.
    pub mask: Var,
    /// `T x T`, row per shuffled slot.
    pub position_logits: Var,
    /// `T x 2d`.
    pub recon: Var,
}

pub fn pretext_forward_graph(g: &mut Graph, model: &TadModel, sample: &PretextSample, ctx: &mut Ctx) -> PretextOutputs {
    let x = g.leaf(sample.masked_features.t().to_owned());
    let embedding = model.embed_graph(g, x, ctx);
    let mask = model.mask_graph(g, embedding);
    let recon = model.reconstruct_graph(g, embedding);
    let xs = g.leaf(sample.shuffled_features().t().to_owned());
    let es = model.embed_graph(g, xs, ctx);
    let position_logits = model.position_logits(g, es, ctx);
    PretextOutputs {
        embedding,
        mask,
        position_logits,
        recon,
    }
}

/// Pretext predictions in public orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextPrediction {
    /// Embedding of the masked input, `C x T`.
    pub embedding: Mat,
    /// Anchor-major mask probabilities, `T x T`.
    pub masks: Mat,
    /// Mean over anchors of `masks`, length `T`.
    pub mask_pred: Vec<f64>,
    pub position_logits: Mat,
    /// `2d x T`.
    pub recon: Mat,
}

pub fn pretext_forward(model: &TadModel, sample: &PretextSample) -> PretextPrediction {
    let mut g = Graph::new();
    let out = pretext_forward_graph(&mut g, model, sample, &mut Ctx::eval());
    let masks = g.value(out.mask).clone();
    let mask_pred = masks.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec();
    PretextPrediction {
        embedding: g.value(out.embedding).t().to_owned(),
        masks,
        mask_pred,
        position_logits: g.value(out.position_logits).clone(),
        recon: g.value(out.recon).t().to_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainLoss {
    pub total: f64,
    pub mask: f64,
    pub recon: f64,
    pub position: f64,
}

fn mask_target(sample: &PretextSample) -> Mat {
    let fg = sample.foreground();
    Mat::from_shape_fn((fg.len(), fg.len()), |(_, i)| fg[i])
}

fn position_onehot(targets: &[usize]) -> Mat {
    let t = targets.len();
    Mat::from_shape_fn((t, t), |(i, c)| if targets[i] == c { 1.0 } else { 0.0 })
}

/// `L_pre = L_m + w_rec * L_rec + w_pos * L_tp` on graph nodes.
pub fn pretrain_loss_graph(
    g: &mut Graph,
    out: &PretextOutputs,
    sample: &PretextSample,
    weights: &PretextLossWeights,
    mask_cfg: &MaskLossConfig,
) -> (Var, PretrainLoss) {
    let t = sample.len();
    let lm = losses::mask_loss_graph(g, out.mask, &mask_target(sample), &vec![true; t], mask_cfg);
    let lr = losses::reconstruction_loss_graph(g, out.recon, &sample.recon_target.t().to_owned());
    let logp = g.log_softmax_rows(out.position_logits);
    let onehot = g.leaf(position_onehot(&sample.position_targets));
    let picked = g.mul(logp, onehot);
    let s = g.sum(picked);
    let lp = g.scale(s, -1.0 / t as f64);
    let a = g.scale(lr, weights.recon);
    let b = g.scale(lp, weights.position);
    let total = g.add(lm, a);
    let total = g.add(total, b);
    let parts = PretrainLoss {
        total: g.scalar(total),
        mask: g.scalar(lm),
        recon: g.scalar(lr),
        position: g.scalar(lp),
    };
    (total, parts)
}

/// Loss of a finished prediction.
pub fn pretrain_loss(
    pred: &PretextPrediction,
    sample: &PretextSample,
    weights: &PretextLossWeights,
    mask_cfg: &MaskLossConfig,
) -> PretrainLoss {
    let t = sample.len();
    let mask = losses::mask_loss(&pred.masks, &mask_target(sample), &vec![true; t], mask_cfg);
    let recon = losses::reconstruction_loss(&pred.recon.t().to_owned(), &sample.recon_target.t().to_owned());
    let lse = logsumexp_rows(&pred.position_logits);
    let position = sample
        .position_targets
        .iter()
        .enumerate()
        .map(|(i, &c)| lse[[i, 0]] - pred.position_logits[[i, c]])
        .sum::<f64>()
        / t as f64;
    PretrainLoss {
        total: mask + weights.recon * recon + weights.position * position,
        mask,
        recon,
        position,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub weights: PretextLossWeights,
    pub adam: AdamConfig,
    pub mask_loss: MaskLossConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            min_fraction: 0.2,
            max_fraction: 0.8,
            weights: PretextLossWeights::default(),
            adam: AdamConfig::default(),
            mask_loss: MaskLossConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("pretraining needs epochs >= 1 and batch_size >= 1"));
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= self.max_fraction && self.max_fraction <= 1.0) {
            return Err(config_err("foreground fractions must satisfy 0 < min <= max <= 1"));
        }
        if self.weights.recon < 0.0 || self.weights.position < 0.0 {
            return Err(config_err("pretext loss weights must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    #[serde(rename = "L_pre")]
    pub total: f64,
    #[serde(rename = "L_m")]
    pub mask: f64,
    #[serde(rename = "L_rec")]
    pub recon: f64,
    #[serde(rename = "L_tp")]
    pub position: f64,
}

/// Stage-I training on unannotated features (each `2d x T`). Fresh pretext
/// samples are drawn every epoch.
pub fn pretrain(
    model: &mut TadModel,
    features: &[Mat],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<Vec<PretrainEpoch>> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(config_err("pretraining needs at least one video"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam);
    let steps_per_epoch = features.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = PretrainLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = BTreeMap::new();
            let w = 1.0 / chunk.len() as f64;
            for (b, &i) in chunk.iter().enumerate() {
                let sample = make_pretext_sample(&features[i], &mut rng, cfg.min_fraction, cfg.max_fraction);
                let mut g = Graph::new();
                let mut ctx = Ctx::train(seed ^ ((step as u64) << 16) ^ b as u64);
                let out = pretext_forward_graph(&mut g, model, &sample, &mut ctx);
                let (loss, parts) = pretrain_loss_graph(&mut g, &out, &sample, &cfg.weights, &cfg.mask_loss);
                let back = g.backward(loss);
                train::accumulate(&mut grads, train::named_grads(&g, &back), w);
                sum.total += parts.total;
                sum.mask += parts.mask;
                sum.recon += parts.recon;
                sum.position += parts.position;
            }
            train::apply(model, &mut adam, &grads, cfg.adam.lr, step, total_steps);
            step += 1;
        }
        let n = features.len() as f64;
        let e = PretrainEpoch {
            epoch,
            total: sum.total / n,
            mask: sum.mask / n,
            recon: sum.recon / n,
            position: sum.position / n,
        };
        log::info!(
            "pretrain epoch {epoch}: L_pre {:.4} (L_m {:.4}, L_rec {:.4}, L_tp {:.4})",
            e.total,
            e.mask,
            e.recon,
            e.position
        );
        on_epoch(&e);
        history.push(e);
    }
    Ok(history)
}

/// Prefix of the parameters that Stage I never trains and fine-tuning re-initializes.
pub const CLASSIFIER_PREFIX: &str = "cls.";

/// Copies a Stage-I checkpoint into `model`, skipping the classification stream.
pub fn load_pretrained(model: &mut TadModel, checkpoint: &ParamStore) -> Result<Vec<String>> {
    model
        .params_mut()
        .load_matching(checkpoint, |name| !name.starts_with(CLASSIFIER_PREFIX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn features(t: usize) -> Mat {
        Mat::from_shape_fn((4, t), |(r, c)| 1.0 + (r * t + c) as f64 * 0.1)
    }

    #[test]
    fn full_foreground_keeps_everything() {
        let f = features(10);
        let s = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(0), 1.0, 1.0);
        assert_eq!((s.start, s.end), (0, 10));
        assert_eq!(s.masked_features, f);
    }

    #[test]
    fn half_foreground_zeroes_the_rest() {
        let f = features(10);
        let s = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(1), 0.5, 0.5);
        let nonzero = (0..10).filter(|&c| s.masked_features.column(c).iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero, 5);
        assert_eq!(s.end - s.start, 5);
        let mut sorted = s.shuffle_perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let shuffled = s.shuffled_features();
        for i in 0..10 {
            assert_eq!(shuffled.column(i), s.masked_features.column(s.shuffle_perm[i]));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = features(12);
        let a = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(5), 0.2, 0.8);
        let b = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(5), 0.2, 0.8);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_shapes_and_zeroed_columns_embed_nonzero() {
        let model = TadModel::new(ModelConfig::toy(2, 8, 4), 0).unwrap();
        let s = make_pretext_sample(&features(8), &mut ChaCha8Rng::seed_from_u64(2), 0.25, 0.25);
        let p = pretext_forward(&model, &s);
        assert_eq!(p.mask_pred.len(), 8);
        assert_eq!(p.position_logits.dim(), (8, 8));
        assert_eq!(p.recon.dim(), (4, 8));
        for c in (0..s.start).chain(s.end..8) {
            let norm = p.embedding.column(c).dot(&p.embedding.column(c)).sqrt();
            assert!(norm > 1e-6);
        }
    }

    #[test]
    fn loss_weights_and_graph_agree() {
        let model = TadModel::new(ModelConfig::toy(2, 8, 4), 3).unwrap();
        let s = make_pretext_sample(&features(8), &mut ChaCha8Rng::seed_from_u64(4), 0.2, 0.8);
        let pred = pretext_forward(&model, &s);
        let cfg = MaskLossConfig::default();
        let w = PretextLossWeights::default();
        let l = pretrain_loss(&pred, &s, &w, &cfg);
        assert!((l.total - (l.mask + 0.8 * l.recon + 0.4 * l.position)).abs() < 1e-12);
        let zero = pretrain_loss(&pred, &s, &PretextLossWeights { recon: 0.0, position: 0.0 }, &cfg);
        assert_eq!(zero.total, zero.mask);
        let mut g = Graph::new();
        let out = pretext_forward_graph(&mut g, &model, &s, &mut Ctx::eval());
        let (_, parts) = pretrain_loss_graph(&mut g, &out, &s, &w, &cfg);
        assert!((parts.total - l.total).abs() < 1e-9);
    }

    #[test]
    fn perfect_position_logits_cost_nothing() {
        let model = TadModel::new(ModelConfig::toy(2, 6, 4), 3).unwrap();
        let s = make_pretext_sample(&features(6), &mut ChaCha8Rng::seed_from_u64(4), 0.5, 0.5);
        let mut pred = pretext_forward(&model, &s);
        pred.position_logits = position_onehot(&s.position_targets) * 200.0;
        assert!(pretrain_loss(&pred, &s, &PretextLossWeights::default(), &MaskLossConfig::default()).position < 1e-12);
    }

    #[test]
    fn position_head_overfits_one_sample() {
        let mut model = TadModel::new(ModelConfig::toy(2, 6, 4), 11).unwrap();
        let f = Mat::from_shape_fn((4, 6), |(r, c)| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let s = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(0), 1.0, 1.0);
        let weights = PretextLossWeights { recon: 0.0, position: 1.0 };
        let mask_cfg = MaskLossConfig::default();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.02,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let mut g = Graph::new();
            let out = pretext_forward_graph(&mut g, &model, &s, &mut Ctx::eval());
            let (loss, _) = pretrain_loss_graph(&mut g, &out, &s, &weights, &mask_cfg);
            let grads = train::named_grads(&g, &g.backward(loss));
            adam.step(model.params_mut(), &grads, 0.02);
        }
        let pred = pretext_forward(&model, &s);
        for (i, &c) in s.position_targets.iter().enumerate() {
            let row = pred.position_logits.row(i);
            let arg = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, c);
        }
    }

    #[test]
    fn classifier_is_not_loaded() {
        let src = TadModel::new(ModelConfig::toy(2, 6, 4), 1).unwrap();
        let mut dst = TadModel::new(ModelConfig::toy(2, 6, 4), 2).unwrap();
        let before = dst.params().get("cls.w").unwrap().clone();
        let loaded = load_pretrained(&mut dst, src.params()).unwrap();
        assert!(loaded.iter().all(|n| !n.starts_with("cls.")));
        assert_eq!(dst.params().get("cls.w").unwrap(), &before);
        assert_eq!(dst.params().get("enc.in.w"), src.params().get("enc.in.w"));
    }
}
