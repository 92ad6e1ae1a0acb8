//! Training objectives shared by both stages: class-balanced classification
//! loss, weighted BCE + dice mask loss, refinement and reconstruction terms,
//! and their equal-weight sum.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::TrainTargets;
use crate::graph::{Graph, Mat, Var};
use crate::model::Outputs;
use crate::refine::{self, RefineConfig};

pub const PROB_CLAMP: f64 = 1e-7;

/// Per-snippet supervision for one video, from ground truth or pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    /// Class in `1..=K+1` per snippet; `None` snippets contribute no class loss.
    pub class_label: Vec<Option<usize>>,
    /// Anchor-major mask targets: row `t` is the target mask of anchor `t`.
    pub mask: Mat,
    /// Anchors that participate in the mask loss.
    pub anchor_valid: Vec<bool>,
    pub num_classes: usize,
}

impl LossTargets {
    pub fn from_ground_truth(t: &TrainTargets) -> Self {
        Self {
            class_label: t.class_label.iter().map(|&c| Some(c)).collect(),
            mask: t.gt_mask.t().to_owned(),
            anchor_valid: vec![true; t.len()],
            num_classes: t.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.class_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_label.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLossConfig {
    /// Tail classes `Y_t` (1-based).
    pub tail_classes: BTreeSet<usize>,
    /// Activation slack for tail classes on background snippets.
    pub epsilon: f64,
}

/// Tail classes: the bottom `fraction` of classes by foreground snippet count.
pub fn tail_classes(targets: &[TrainTargets], num_classes: usize, fraction: f64) -> BTreeSet<usize> {
    let mut counts = vec![0usize; num_classes];
    for t in targets {
        for &c in &t.class_label {
            if c <= num_classes {
                counts[c - 1] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (1..=num_classes).collect();
    order.sort_by_key(|&c| (counts[c - 1], c));
    let n = (fraction * num_classes as f64).round() as usize;
    order.into_iter().take(n.min(num_classes)).collect()
}

/// `L_c = (1/T) * (sum_fg L_bce + sum_bg L_wbce)` on probabilities `T x (K+1)`.
pub fn classification_loss_graph(g: &mut Graph, probs: Var, targets: &LossTargets, cfg: &ClassLossConfig) -> Var {
    let p = g.value(probs).clone();
    let (t_len, classes) = p.dim();
    let bg = classes;
    let mut pos = Mat::zeros((t_len, classes));
    let mut neg = Mat::zeros((t_len, classes));
    for (t, label) in targets.class_label.iter().enumerate() {
        let Some(y) = *label else { continue };
        pos[[t, y - 1]] = 1.0;
        for k in 1..=classes {
            if k == y {
                continue;
            }
            let suppressed = y == bg && cfg.tail_classes.contains(&k) && p[[t, k - 1]] < cfg.epsilon;
            neg[[t, k - 1]] = if suppressed { 0.0 } else { 1.0 };
        }
    }
    let pc = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.ln(pc);
    let q = g.scale(pc, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.ln(q);
    let pos = g.leaf(pos);
    let neg = g.leaf(neg);
    let a = g.mul(log_p, pos);
    let b = g.mul(log_q, neg);
    let s = g.add(a, b);
    let s = g.sum(s);
    g.scale(s, -1.0 / t_len as f64)
}

pub fn classification_loss(probs: &Mat, targets: &LossTargets, cfg: &ClassLossConfig) -> f64 {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone());
    let l = classification_loss_graph(&mut g, p, targets, cfg);
    g.scalar(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskBalance {
    /// Inverse class proportions computed from the targets.
    Balanced,
    Fixed { fg: f64, bg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskLossConfig {
    pub dice_weight: f64,
    /// Use `1 - 2 m.g / sum(m^2 + g^2)` instead of the single-numerator form.
    pub standard_dice: bool,
    pub balance: MaskBalance,
}

impl Default for MaskLossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.6,
            standard_dice: false,
            balance: MaskBalance::Balanced,
        }
    }
}

/// `(beta_fg, beta_bg)` over the valid anchors: `N / (2 n_fg)` and `N / (2 n_bg)`.
pub fn balance_weights(target: &Mat, anchor_valid: &[bool]) -> (f64, f64) {
    let mut n = 0usize;
    let mut fg = 0.0;
    for (row, &ok) in target.rows().into_iter().zip(anchor_valid) {
        if ok {
            n += row.len();
            fg += row.sum();
        }
    }
    let bg = n as f64 - fg;
    if fg < 0.5 || bg < 0.5 {
        return (1.0, 1.0);
    }
    (n as f64 / (2.0 * fg), n as f64 / (2.0 * bg))
}

/// Mask loss on anchor-major probabilities `m` and binary targets; averaged over valid anchors.
pub fn mask_loss_graph(g: &mut Graph, m: Var, target: &Mat, anchor_valid: &[bool], cfg: &MaskLossConfig) -> Var {
    let n_valid = anchor_valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return g.constant_scalar(0.0);
    }
    let (beta_fg, beta_bg) = match cfg.balance {
        MaskBalance::Balanced => balance_weights(target, anchor_valid),
        MaskBalance::Fixed { fg, bg } => (fg, bg),
    };
    let (rows, _) = target.dim();
    let valid = Mat::from_shape_fn((rows, 1), |(t, _)| if anchor_valid[t] { 1.0 } else { 0.0 });

    // weighted BCE, summed along each anchor's mask
    let mc = g.clamp(m, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_m = g.ln(mc);
    let q = g.scale(mc, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.ln(q);
    let wpos = g.leaf(target * beta_fg);
    let wneg = g.leaf(target.mapv(|v| (1.0 - v) * beta_bg));
    let a = g.mul(log_m, wpos);
    let b = g.mul(log_q, wneg);
    let bce = g.add(a, b);
    let bce = g.sum_cols(bce);
    let bce = g.scale(bce, -1.0);

    // dice; anchors with an all-zero prediction and target score zero
    let m_val = g.value(m).clone();
    let empty: Vec<bool> = (0..rows)
        .map(|t| {
            let s: f64 = m_val.row(t).iter().map(|v| v * v).sum::<f64>() + target.row(t).iter().map(|v| v * v).sum::<f64>();
            s < 1e-12
        })
        .collect();
    let gt = g.leaf(target.clone());
    let inter = g.mul(m, gt);
    let inter = g.sum_cols(inter);
    let m2 = g.square(m);
    let m2 = g.sum_cols(m2);
    let g2 = Mat::from_shape_fn((rows, 1), |(t, _)| {
        let s: f64 = target.row(t).iter().map(|v| v * v).sum();
        if empty[t] {
            1.0
        } else {
            s
        }
    });
    let g2 = g.leaf(g2);
    let den = g.add(m2, g2);
    let ratio = g.div(inter, den);
    let numer = if cfg.standard_dice { 2.0 } else { 1.0 };
    let ratio = g.scale(ratio, -numer);
    let dice = g.add_scalar(ratio, 1.0);
    let dice_mask = Mat::from_shape_fn((rows, 1), |(t, _)| if empty[t] { 0.0 } else { cfg.dice_weight });
    let dice_mask = g.leaf(dice_mask);
    let dice = g.mul(dice, dice_mask);

    let per_anchor = g.add(bce, dice);
    let valid = g.leaf(valid);
    let per_anchor = g.mul(per_anchor, valid);
    let total = g.sum(per_anchor);
    g.scale(total, 1.0 / n_valid as f64)
}

pub fn mask_loss(m: &Mat, target: &Mat, anchor_valid: &[bool], cfg: &MaskLossConfig) -> f64 {
    let mut g = Graph::new();
    let mv = g.leaf(m.clone());
    let l = mask_loss_graph(&mut g, mv, target, anchor_valid, cfg);
    g.scalar(l)
}

/// Mean over snippets of the squared distance between L2-normalized rows.
pub fn reconstruction_loss_graph(g: &mut Graph, recon: Var, target_rows: &Mat) -> Var {
    let mut tn = target_rows.clone();
    for mut row in tn.rows_mut() {
        let n = (row.dot(&row) + 1e-12).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    let rn = g.l2_normalize_rows(recon, 1e-12);
    let tn = g.leaf(tn);
    let d = g.sub(rn, tn);
    let d = g.square(d);
    let s = g.sum(d);
    g.scale(s, 1.0 / target_rows.nrows() as f64)
}

pub fn reconstruction_loss(recon: &Mat, target_rows: &Mat) -> f64 {
    let mut g = Graph::new();
    let r = g.leaf(recon.clone());
    let l = reconstruction_loss_graph(&mut g, r, target_rows);
    g.scalar(l)
}

/// Which terms enter the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub refine: bool,
    pub recon: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            refine: true,
            recon: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub class: f64,
    pub mask: f64,
    pub refine: f64,
    pub recon: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.class + self.mask + self.refine + self.recon
    }

    pub fn add_assign(&mut self, o: &LossComponents) {
        self.class += o.class;
        self.mask += o.mask;
        self.refine += o.refine;
        self.recon += o.recon;
    }

    pub fn scaled(&self, k: f64) -> LossComponents {
        LossComponents {
            class: self.class * k,
            mask: self.mask * k,
            refine: self.refine * k,
            recon: self.recon * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub class: ClassLossConfig,
    pub mask: MaskLossConfig,
    pub refine: RefineConfig,
    pub switches: LossSwitches,
}

/// `L = L_c + L_m + L_ref + L_rec` for one forward pass. `feature_rows` is the
/// `T x 2d` input, used as the reconstruction target.
pub fn total_loss_graph(
    g: &mut Graph,
    out: &Outputs,
    feature_rows: &Mat,
    targets: &LossTargets,
    cfg: &ObjectiveConfig,
) -> (Var, LossComponents) {
    let lc = classification_loss_graph(g, out.class_probs, targets, &cfg.class);
    let lm = mask_loss_graph(g, out.mask, &targets.mask, &targets.anchor_valid, &cfg.mask);
    let mut parts = vec![lc, lm];
    let mut comps = LossComponents {
        class: g.scalar(lc),
        mask: g.scalar(lm),
        ..LossComponents::default()
    };
    if cfg.switches.refine {
        if let Some(lr) = refinement_term(g, out, &cfg.refine) {
            comps.refine = g.scalar(lr);
            parts.push(lr);
        }
    }
    if cfg.switches.recon {
        let lr = reconstruction_loss_graph(g, out.recon, feature_rows);
        comps.recon = g.scalar(lr);
        parts.push(lr);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    (total, comps)
}

/// Mines hard/easy snippets from the current predictions and builds `L_ref`.
pub fn refinement_term(g: &mut Graph, out: &Outputs, cfg: &RefineConfig) -> Option<Var> {
    let bin = refine::binarize(g.value(out.mask), cfg.mask_threshold);
    let (x_fg, x_bg) = refine::hard_indices(&bin, g.value(out.refine_proj), cfg);
    let (y_fg, y_bg) = refine::easy_indices(g.value(out.class_probs), cfg);
    if [&x_fg, &x_bg, &y_fg, &y_bg].iter().any(|v| v.is_empty()) {
        return None;
    }
    let xf = g.gather_rows(out.refine_proj, &x_fg);
    let xb = g.gather_rows(out.refine_proj, &x_bg);
    let yf = g.gather_rows(out.class_proj, &y_fg);
    let yb = g.gather_rows(out.class_proj, &y_bg);
    refine::refinement_loss_graph(g, xf, xb, yf, yb, cfg)
}
