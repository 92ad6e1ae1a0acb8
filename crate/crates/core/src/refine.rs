//! Boundary refinement through inter-stream interaction.
//!
//! Mask predictions are binarized and split per anchor into an eroded interior
//! and a boundary band. Snippets in those regions, scored by the refinement
//! projection `E_m`, form the hard foreground/background sets; confident
//! snippets of the classification stream, taken from `E_p`, form the easy sets.
//! A contrastive loss pulls hard and easy snippets of the same kind together.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMode {
    Infonce,
    MarginTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub mask_threshold: f64,
    pub class_threshold: f64,
    pub erosion_kernel: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub mode: ContrastMode,
    pub margin: f64,
    /// Route the boundary band to the hard foreground set and the interior to
    /// the hard background set instead.
    pub flip_regions: bool,
    /// Sharpness of the soft (differentiable) erosion.
    pub soft_beta: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            mask_threshold: 0.7,
            class_threshold: 0.3,
            erosion_kernel: 7,
            top_k: 40,
            temperature: 0.07,
            mode: ContrastMode::Infonce,
            margin: 0.5,
            flip_regions: false,
            soft_beta: 0.05,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.mask_threshold) || !open(self.class_threshold) {
            return Err(config_err("refinement thresholds must lie in (0, 1)"));
        }
        if self.erosion_kernel < 3 || self.erosion_kernel.is_multiple_of(2) {
            return Err(config_err("erosion kernel must be odd and >= 3"));
        }
        if self.top_k == 0 {
            return Err(config_err("top_k must be >= 1"));
        }
        if !(self.temperature > 0.0) || !(self.soft_beta > 0.0) {
            return Err(config_err("temperature and soft_beta must be positive"));
        }
        Ok(())
    }
}

/// Heaviside step `eta(m - theta)` with `eta(0) = 1`.
pub fn binarize(m: &Mat, threshold: f64) -> Mat {
    m.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Hard 1-D erosion with zero padding. Returns `(interior, band)` where
/// `band = mask - interior`.
pub fn erode_1d(mask: &[f64], kernel: usize) -> (Vec<f64>, Vec<f64>) {
    let n = mask.len();
    let r = (kernel / 2) as isize;
    let interior: Vec<f64> = (0..n as isize)
        .map(|i| {
            let all = (i - r..=i + r).all(|k| k >= 0 && (k as usize) < n && mask[k as usize] >= 0.5);
            if all {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let band = mask.iter().zip(&interior).map(|(m, i)| m - i).collect();
    (interior, band)
}

/// Soft erosion `-beta * log(sum(exp(-x / beta)))` over the same window; tends
/// to the hard minimum as `beta -> 0`.
pub fn soft_erode_1d(mask: &[f64], kernel: usize, beta: f64) -> Vec<f64> {
    let col = Mat::from_shape_vec((mask.len(), 1), mask.to_vec()).expect("column");
    crate::graph::soft_min_window_value(&col, kernel, beta).into_raw_vec_and_offset().0
}

/// Hard and easy snippet embeddings; each set is a `n x c` matrix with one row
/// per selected snippet (possibly zero rows).
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetBank {
    pub x_fg: Mat,
    pub x_bg: Mat,
    pub y_fg: Mat,
    pub y_bg: Mat,
}

/// Indices selected for each set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub x_fg: Vec<usize>,
    pub x_bg: Vec<usize>,
    pub y_fg: Vec<usize>,
    pub y_bg: Vec<usize>,
}

impl Selection {
    pub fn any_empty(&self) -> bool {
        self.x_fg.is_empty() || self.x_bg.is_empty() || self.y_fg.is_empty() || self.y_bg.is_empty()
    }
}

/// Top-`k` candidates by descending score; ties go to the lower index.
fn top_k(candidates: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut c: Vec<(usize, f64)> = candidates.collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c.truncate(k);
    c.into_iter().map(|(i, _)| i).collect()
}

/// Hard snippet selection from anchor-major binary masks (`row t` = anchor `t`)
/// and `E_m` rows (`T x C_m`). Returns `(X_fg, X_bg)` snippet indices.
pub(crate) fn hard_indices(anchor_bin: &Mat, em_rows: &Mat, cfg: &RefineConfig) -> (Vec<usize>, Vec<usize>) {
    let t = em_rows.nrows();
    let mut interior_any = vec![false; t];
    let mut band_any = vec![false; t];
    for row in anchor_bin.rows() {
        if row.iter().all(|&v| v < 0.5) {
            continue;
        }
        let (interior, band) = erode_1d(&row.to_vec(), cfg.erosion_kernel);
        for i in 0..t {
            interior_any[i] |= interior[i] > 0.5;
            band_any[i] |= band[i] > 0.5;
        }
    }
    let score = |i: usize| em_rows.row(i).dot(&em_rows.row(i)).sqrt();
    let pick = |region: &[bool]| top_k((0..t).filter(|&i| region[i]).map(|i| (i, score(i))), cfg.top_k);
    let (fg, bg) = (pick(&interior_any), pick(&band_any));
    if cfg.flip_regions {
        (bg, fg)
    } else {
        (fg, bg)
    }
}

/// Easy snippet selection from probabilities (`T x (K + 1)` rows). Returns
/// `(Y_fg, Y_bg)` snippet indices.
pub(crate) fn easy_indices(prob_rows: &Mat, cfg: &RefineConfig) -> (Vec<usize>, Vec<usize>) {
    let k = prob_rows.ncols() - 1;
    let theta = cfg.class_threshold;
    let fg = top_k(
        prob_rows.rows().into_iter().enumerate().filter_map(|(t, row)| {
            let best = row.iter().take(k).cloned().fold(f64::NEG_INFINITY, f64::max);
            (best >= theta).then_some((t, best))
        }),
        cfg.top_k,
    );
    let bg = top_k(
        prob_rows
            .rows()
            .into_iter()
            .enumerate()
            .filter_map(|(t, row)| (row[k] >= theta).then_some((t, row[k]))),
        cfg.top_k,
    );
    (fg, bg)
}

fn gather_columns(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_shape_fn((idx.len(), m.nrows()), |(r, c)| m[[c, idx[r]]])
}

/// Hard snippets from `M_bin` (`T x T`, column per anchor) and `E_m` (`C_m x T`).
/// Rows of the returned matrices are the selected `E_m` columns.
pub fn mine_hard(m_bin: &Mat, e_m: &Mat, cfg: &RefineConfig) -> (Mat, Mat) {
    let (fg, bg) = hard_indices(&m_bin.t().to_owned(), &e_m.t().to_owned(), cfg);
    (gather_columns(e_m, &fg), gather_columns(e_m, &bg))
}

/// Easy snippets from `P` (`(K + 1) x T`) and `E_p` (`C_p x T`).
pub fn mine_easy(p: &Mat, e_p: &Mat, cfg: &RefineConfig) -> (Mat, Mat) {
    let (fg, bg) = easy_indices(&p.t().to_owned(), cfg);
    (gather_columns(e_p, &fg), gather_columns(e_p, &bg))
}

fn contrast_term(g: &mut Graph, anchors: Var, pos: Var, neg: Var, cfg: &RefineConfig) -> Var {
    let a = g.l2_normalize_rows(anchors, 1e-12);
    let p = g.l2_normalize_rows(pos, 1e-12);
    let n = g.l2_normalize_rows(neg, 1e-12);
    let sp = g.matmul_bt(a, p);
    let sn = g.matmul_bt(a, n);
    match cfg.mode {
        ContrastMode::Infonce => {
            let sp = g.scale(sp, 1.0 / cfg.temperature);
            let sn = g.scale(sn, 1.0 / cfg.temperature);
            let all = g.concat_cols(&[sp, sn]);
            let lse_all = g.logsumexp_rows(all);
            let lse_pos = g.logsumexp_rows(sp);
            let d = g.sub(lse_all, lse_pos);
            g.mean(d)
        }
        ContrastMode::MarginTriplet => {
            let np = g.shape(sp).1 as f64;
            let nn = g.shape(sn).1 as f64;
            let mp = g.sum_cols(sp);
            let mp = g.scale(mp, 1.0 / np);
            let mn = g.sum_cols(sn);
            let mn = g.scale(mn, 1.0 / nn);
            let d = g.sub(mn, mp);
            let d = g.add_scalar(d, cfg.margin);
            let h = g.relu(d);
            g.mean(h)
        }
    }
}

/// `tri(x_fg, y_fg, y_bg) + tri(y_bg, x_bg, y_fg)` on graph nodes (each `n x c`).
/// Returns `None` when any set is empty (the loss is then zero).
pub fn refinement_loss_graph(
    g: &mut Graph,
    x_fg: Var,
    x_bg: Var,
    y_fg: Var,
    y_bg: Var,
    cfg: &RefineConfig,
) -> Option<Var> {
    if [x_fg, x_bg, y_fg, y_bg].iter().any(|&v| g.shape(v).0 == 0) {
        return None;
    }
    let t1 = contrast_term(g, x_fg, y_fg, y_bg, cfg);
    let t2 = contrast_term(g, y_bg, x_bg, y_fg, cfg);
    Some(g.add(t1, t2))
}

pub fn refinement_loss(bank: &SnippetBank, cfg: &RefineConfig) -> f64 {
    let mut g = Graph::new();
    let vars = [&bank.x_fg, &bank.x_bg, &bank.y_fg, &bank.y_bg].map(|m| g.leaf(m.clone()));
    refinement_loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3], cfg)
        .map(|v| g.scalar(v))
        .unwrap_or(0.0)
}
