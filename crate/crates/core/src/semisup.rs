//! Stage-II fine-tuning: sharpened pseudo labels for unlabeled videos and the
//! alternating predict/train loop over labeled and pseudo-labeled data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::make_targets;
use crate::error::{config_err, Result};
use crate::graph::{softmax_rows, Graph, Mat};
use crate::losses::{self, ClassLossConfig, LossComponents, LossSwitches, LossTargets, MaskLossConfig, ObjectiveConfig};
use crate::model::TadModel;
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::refine::RefineConfig;
use crate::train::{self, PreparedVideo, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpenConfig {
    /// Class sharpening base `tau`.
    pub tau: f64,
    /// Mask temperature `tau_m`.
    pub tau_m: f64,
    pub class_threshold: f64,
    pub mask_threshold: f64,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self {
            tau: 1.1,
            tau_m: 0.7,
            class_threshold: 0.3,
            mask_threshold: 0.7,
        }
    }
}

impl SharpenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1.0 {
            return Err(config_err("tau must be >= 1"));
        }
        if self.tau_m <= 0.0 {
            return Err(config_err("tau_m must be > 0"));
        }
        Ok(())
    }
}

/// `tau_c = tau - (tau - 1) * y_max`.
pub fn sharpening_temperature(tau: f64, y_max: f64) -> f64 {
    tau - (tau - 1.0) * y_max
}

/// Pseudo class of one snippet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoClass {
    /// 1-based class in `1..=K+1`.
    pub label: usize,
    pub confidence: f64,
    pub temperature: f64,
}

impl PseudoClass {
    pub fn accepted(&self, threshold: f64) -> bool {
        self.confidence >= threshold
    }
}

/// Sharpens class logits (`(K + 1) x T`) column by column.
pub fn sharpen_class(logits: &Mat, cfg: &SharpenConfig) -> Vec<PseudoClass> {
    let k = logits.nrows() - 1;
    logits
        .columns()
        .into_iter()
        .map(|col| {
            let row = col.to_owned().insert_axis(ndarray::Axis(0));
            let p = softmax_rows(&row);
            let y_max = p.iter().take(k).cloned().fold(0.0, f64::max);
            let temperature = sharpening_temperature(cfg.tau, y_max);
            let q = softmax_rows(&(row / temperature));
            let (label, confidence) = q
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            PseudoClass {
                label: label + 1,
                confidence,
                temperature,
            }
        })
        .collect()
}

/// `sigmoid(logits / tau_m)`.
pub fn soft_pseudo_mask(mask_logits: &Mat, cfg: &SharpenConfig) -> Mat {
    mask_logits.mapv(|z| crate::graph::sigmoid(z / cfg.tau_m))
}

/// Binary pseudo mask `eta(sigmoid(logits / tau_m) - theta_m)`, same orientation as the input.
pub fn sharpen_mask(mask_logits: &Mat, cfg: &SharpenConfig) -> Mat {
    soft_pseudo_mask(mask_logits, cfg).mapv(|v| if v >= cfg.mask_threshold { 1.0 } else { 0.0 })
}

/// Pseudo targets from a prediction: class logits `(K + 1) x T`, mask logits `T x T`
/// (column per anchor). Low-confidence snippets are ignored by both losses.
pub fn pseudo_targets(class_logits: &Mat, mask_logits: &Mat, cfg: &SharpenConfig) -> LossTargets {
    let k = class_logits.nrows() - 1;
    let t_len = class_logits.ncols();
    let classes = sharpen_class(class_logits, cfg);
    let g = sharpen_mask(mask_logits, cfg);
    let mut mask = Mat::zeros((t_len, t_len));
    let mut class_label = Vec::with_capacity(t_len);
    let mut anchor_valid = Vec::with_capacity(t_len);
    for (t, c) in classes.iter().enumerate() {
        if !c.accepted(cfg.class_threshold) {
            class_label.push(None);
            anchor_valid.push(false);
            continue;
        }
        class_label.push(Some(c.label));
        anchor_valid.push(true);
        if c.label <= k {
            mask.row_mut(t).assign(&g.column(t));
        }
    }
    LossTargets {
        class_label,
        mask,
        anchor_valid,
        num_classes: k,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Leading epochs trained on labeled videos only.
    pub warmup_epochs: usize,
    /// Videos per step; split evenly between labeled and unlabeled once pseudo labels are on.
    pub batch_size: usize,
    /// Disable to obtain the labeled-only baseline under the same schedule.
    pub use_pseudo: bool,
    /// Fraction of the classes, by labeled foreground count, treated as tail classes.
    pub tail_fraction: f64,
    pub adam: AdamConfig,
    pub sharpen: SharpenConfig,
    pub mask_loss: MaskLossConfig,
    pub refine: RefineConfig,
    pub switches: LossSwitches,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            warmup_epochs: 3,
            batch_size: 8,
            use_pseudo: true,
            tail_fraction: 0.3,
            adam: AdamConfig::default(),
            sharpen: SharpenConfig::default(),
            mask_loss: MaskLossConfig::default(),
            refine: RefineConfig::default(),
            switches: LossSwitches::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(config_err("finetune needs epochs >= 1 and batch_size >= 2"));
        }
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return Err(config_err("tail_fraction must be in [0, 1]"));
        }
        self.sharpen.validate()?;
        self.refine.validate()
    }
}

/// One line of the fine-tuning metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_ref")]
    pub l_ref: f64,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    #[serde(rename = "val_mAP")]
    pub val_map: Option<f64>,
}

/// Loss and parameter gradients of one video.
pub fn video_gradients(
    model: &TadModel,
    x: &Mat,
    targets: &LossTargets,
    objective: &ObjectiveConfig,
    ctx: &mut Ctx,
) -> (LossComponents, BTreeMap<String, Mat>) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = model.forward(&mut g, xv, ctx);
    let (loss, comps) = losses::total_loss_graph(&mut g, &out, x, targets, objective);
    let grads = g.backward(loss);
    (comps, train::named_grads(&g, &grads))
}

fn refresh_pseudo(model: &TadModel, videos: &[PreparedVideo], cfg: &SharpenConfig) -> Result<Vec<LossTargets>> {
    videos
        .iter()
        .map(|v| {
            let p = model.predict(&v.features())?;
            Ok(pseudo_targets(&p.class_logits, &p.mask_logits, cfg))
        })
        .collect()
}

/// Stage-II training. `labeled` videos must carry targets; `unlabeled` targets
/// are ignored and replaced by pseudo labels refreshed every epoch after warm-up.
pub fn finetune(
    model: &mut TadModel,
    labeled: &[PreparedVideo],
    unlabeled: &[PreparedVideo],
    validation: Option<Validation<'_>>,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(config_err("fine-tuning needs at least one labeled video"));
    }
    let k = model.config().num_classes;
    let t_len = model.config().t_len;
    let mut label_targets = Vec::with_capacity(labeled.len());
    for v in labeled {
        label_targets.push(match &v.targets {
            Some(t) => t.clone(),
            None => LossTargets::from_ground_truth(&make_targets(&v.record, t_len, k)),
        });
    }
    let gt_for_tail: Vec<_> = labeled.iter().map(|v| make_targets(&v.record, t_len, k)).collect();
    let objective = ObjectiveConfig {
        class: ClassLossConfig {
            tail_classes: losses::tail_classes(&gt_for_tail, k, cfg.tail_fraction),
            epsilon: cfg.sharpen.class_threshold,
        },
        mask: cfg.mask_loss.clone(),
        refine: cfg.refine.clone(),
        switches: cfg.switches,
    };

    let half = (cfg.batch_size / 2).max(1);
    let steps_per_epoch = labeled.len().max(unlabeled.len()).div_ceil(half);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lab_order: Vec<usize> = Vec::new();

    for epoch in 0..cfg.epochs {
        let pseudo_on = cfg.use_pseudo && epoch >= cfg.warmup_epochs && !unlabeled.is_empty();
        let pseudo = if pseudo_on {
            refresh_pseudo(model, unlabeled, &cfg.sharpen)?
        } else {
            Vec::new()
        };
        let mut un_order: Vec<usize> = (0..unlabeled.len()).collect();
        un_order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut count = 0usize;

        for s in 0..steps_per_epoch {
            let mut batch: Vec<(&Mat, &LossTargets)> = Vec::with_capacity(2 * half);
            for _ in 0..half {
                if lab_order.is_empty() {
                    lab_order = (0..labeled.len()).collect();
                    lab_order.shuffle(&mut rng);
                }
                let i = lab_order.pop().expect("refilled above");
                batch.push((&labeled[i].x, &label_targets[i]));
            }
            if pseudo_on {
                for j in 0..half {
                    let u = un_order[(s * half + j) % un_order.len()];
                    batch.push((&unlabeled[u].x, &pseudo[u]));
                }
            }
            let mut grads = BTreeMap::new();
            let w = 1.0 / batch.len() as f64;
            for (b, (x, t)) in batch.iter().enumerate() {
                let mut ctx = Ctx::train(seed ^ ((step as u64) << 16) ^ b as u64);
                let (comps, g) = video_gradients(model, x, t, &objective, &mut ctx);
                sums.add_assign(&comps);
                count += 1;
                train::accumulate(&mut grads, g, w);
            }
            train::apply(model, &mut adam, &grads, cfg.adam.lr, step, total_steps);
            step += 1;
        }

        let mean = sums.scaled(1.0 / count.max(1) as f64);
        let val_map = match validation {
            Some(v) => Some(train::evaluate(model, v.videos, v.decode, v.eval)?.average),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            l_c: mean.class,
            l_m: mean.mask,
            l_ref: mean.refine,
            l_rec: mean.recon,
            val_map,
        };
        log::info!(
            "finetune epoch {epoch}: L_c {:.4} L_m {:.4} L_ref {:.4} L_rec {:.4} val_mAP {:?}",
            m.l_c,
            m.l_m,
            m.l_ref,
            m.l_rec,
            m.val_map
        );
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}
