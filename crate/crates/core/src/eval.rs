//! Detection metrics: temporal IoU, all-point interpolated AP with greedy
//! one-to-one matching, and mAP over a tIoU grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_targets, VideoRecord};
use crate::decode::{candidate_runs, detect, run_to_instance, soft_nms, ActionInstance, DecodeConfig, Detections, SnippetRun};
use crate::error::{config_err, Result};
use crate::graph::{Graph, Mat};
use crate::heads::{ClassScoreMatrix, MaskMatrix};
use crate::model::TadModel;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::train::PreparedVideo;

pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
}

impl EvalConfig {
    /// `0.5:0.05:0.95`.
    pub fn large() -> Self {
        Self {
            tiou_grid: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }

    pub fn small() -> Self {
        Self {
            tiou_grid: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() {
            return Err(config_err("tiou_grid must not be empty"));
        }
        if self.tiou_grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) || self.tiou_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("tiou_grid must be strictly increasing inside (0, 1)"));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::large()
    }
}

/// Ground-truth instances per video (score ignored).
pub type GroundTruth = BTreeMap<String, Vec<ActionInstance>>;

pub fn ground_truth(records: &[VideoRecord]) -> GroundTruth {
    records
        .iter()
        .map(|r| {
            let inst = r
                .segments
                .iter()
                .map(|s| ActionInstance {
                    start: s.start,
                    end: s.end,
                    label: s.label,
                    score: 1.0,
                })
                .collect();
            (r.id.clone(), inst)
        })
        .collect()
}

/// A prediction tagged with its video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment<'a> {
    pub video: &'a str,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// Single-class AP. `gts` maps video id to ground-truth segments of the class.
pub fn average_precision(preds: &[ScoredSegment<'_>], gts: &BTreeMap<&str, Vec<(f64, f64)>>, thr: f64) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 || preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&ScoredSegment> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));

    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = Vec::with_capacity(order.len());
    for p in order {
        let mut hit = false;
        if let (Some(list), Some(flags)) = (gts.get(p.video), used.get_mut(p.video)) {
            let best = list
                .iter()
                .enumerate()
                .filter(|(j, _)| !flags[*j])
                .map(|(j, g)| (j, tiou((p.start, p.end), *g)))
                .filter(|&(_, iou)| iou >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((j, _)) = best {
                flags[j] = true;
                hit = true;
            }
        }
        tp.push(hit);
    }
    interpolated_ap(&tp, n_gt)
}

/// Area under the precision envelope for a ranked hit list.
pub(crate) fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut hits = 0usize;
    for (i, &h) in tp.iter().enumerate() {
        hits += usize::from(h);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP per threshold.
    pub map: Vec<f64>,
    /// Mean of `map` over the grid.
    pub average: f64,
    /// Per-class AP rows (one value per threshold), keyed by 1-based class.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

impl MapReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one header row of thresholds plus `Avg`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "tIoU");
        for t in &self.thresholds {
            let _ = write!(out, " {t:>6.2}");
        }
        let _ = writeln!(out, " {:>6}", "Avg");
        let _ = write!(out, "{:>8}", "mAP");
        for m in &self.map {
            let _ = write!(out, " {:>6.2}", 100.0 * m);
        }
        let _ = writeln!(out, " {:>6.2}", 100.0 * self.average);
        out
    }
}

/// mAP over every class present in either detections or ground truth.
pub fn map_report(dets: &Detections, gt: &GroundTruth, cfg: &EvalConfig) -> MapReport {
    let gt_classes: BTreeSet<usize> = gt.values().flatten().map(|g| g.label).collect();
    let det_classes: BTreeSet<usize> = dets.values().flatten().map(|d| d.label).collect();
    for c in det_classes.difference(&gt_classes) {
        log::warn!("class {c} appears in detections but not in ground truth; its AP is 0");
    }
    let classes: BTreeSet<usize> = gt_classes.union(&det_classes).copied().collect();

    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let preds: Vec<ScoredSegment> = dets
            .iter()
            .flat_map(|(v, list)| {
                list.iter().filter(|d| d.label == c).map(move |d| ScoredSegment {
                    video: v.as_str(),
                    start: d.start,
                    end: d.end,
                    score: d.score,
                })
            })
            .collect();
        let gts: BTreeMap<&str, Vec<(f64, f64)>> = gt
            .iter()
            .map(|(v, list)| {
                let segs = list.iter().filter(|g| g.label == c).map(|g| (g.start, g.end)).collect();
                (v.as_str(), segs)
            })
            .collect();
        let row = cfg.tiou_grid.iter().map(|&t| average_precision(&preds, &gts, t)).collect();
        per_class.insert(c, row);
    }
    let map: Vec<f64> = (0..cfg.tiou_grid.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|r: &Vec<f64>| r[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len().max(1) as f64;
    MapReport {
        thresholds: cfg.tiou_grid.clone(),
        map,
        average,
        per_class,
    }
}

/// Mean-pooled crop classifier over `K + 1` classes (background last), the
/// classification stage of the sequential skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct CropClassifier {
    /// `(2d + 1) x (K + 1)`; last row is the bias.
    weights: Mat,
}

fn runs_of(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut a = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[a] {
            out.push((a, i - 1, labels[a]));
            a = i;
        }
    }
    out
}

fn crop_mean(x: &Mat, first: usize, last: usize) -> Vec<f64> {
    let mut v: Vec<f64> = x
        .slice(ndarray::s![first..=last, ..])
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty crop")
        .to_vec();
    v.push(1.0);
    v
}

impl CropClassifier {
    /// Fits multinomial logistic regression on ground-truth crops of the
    /// labeled videos: every maximal same-label run, background runs included.
    pub fn fit(labeled: &[PreparedVideo], num_classes: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for v in labeled {
            let t = make_targets(&v.record, v.x.nrows(), num_classes);
            for (a, b, c) in runs_of(&t.class_label) {
                rows.push(crop_mean(&v.x, a, b));
                labels.push(c);
            }
        }
        if rows.is_empty() {
            return Err(config_err("crop classifier needs labeled videos"));
        }
        let dim = rows[0].len();
        let x = Mat::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]);
        let y = Mat::from_shape_fn((rows.len(), num_classes + 1), |(i, c)| if labels[i] == c + 1 { 1.0 } else { 0.0 });
        let mut store = ParamStore::new();
        store.init_zeros("w", (dim, num_classes + 1));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..300 {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let w = g.param(&store, "w");
            let logits = g.matmul(xv, w);
            let logp = g.log_softmax_rows(logits);
            let yv = g.leaf(y.clone());
            let picked = g.mul(logp, yv);
            let s = g.sum(picked);
            let loss = g.scale(s, -1.0 / rows.len() as f64);
            let grads = g.backward(loss);
            let named = crate::train::named_grads(&g, &grads);
            adam.step(&mut store, &named, 0.05);
        }
        Ok(Self {
            weights: store.get("w").expect("initialized").clone(),
        })
    }

    /// Class probabilities (`K + 1`, background last) of the crop `[first, last]` of `x` (`T x 2d`).
    pub fn classify(&self, x: &Mat, first: usize, last: usize) -> Vec<f64> {
        let v = ndarray::Array1::from(crop_mean(x, first, last));
        let logits = v.dot(&self.weights).insert_axis(ndarray::Axis(0));
        crate::graph::softmax_rows(&logits).row(0).to_vec()
    }
}

/// Where the localization stage gets its masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    GroundTruth,
    Predicted,
}

/// Detections of the sequential skeleton: class-agnostic runs from the masks
/// (anchored by actionness `1 - P_bg`), each crop then labeled by `crop`.
pub fn sequential_detect(
    probs: &ClassScoreMatrix,
    masks: &MaskMatrix,
    x: &Mat,
    duration: f64,
    crop: &CropClassifier,
    cfg: &DecodeConfig,
) -> Result<Vec<ActionInstance>> {
    let t_len = probs.len();
    let actionness = Mat::from_shape_fn((2, t_len), |(r, t)| {
        let bg = probs.background(t);
        if r == 0 {
            1.0 - bg
        } else {
            bg
        }
    });
    let agnostic = ClassScoreMatrix::new(actionness)?;
    let k = probs.num_classes();
    let mut out = Vec::new();
    for run in candidate_runs(&agnostic, masks, cfg) {
        let p = crop.classify(x, run.first, run.last);
        let (label, prob) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        if label == k {
            continue;
        }
        // same fusion as the parallel decoder: class confidence times the run score
        let fused = SnippetRun {
            label: label + 1,
            score: run.score * prob,
            ..run
        };
        out.push(run_to_instance(&fused, t_len, duration));
    }
    Ok(soft_nms(&out, cfg))
}

/// mAP of the parallel decoder and the sequential skeleton under both mask sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub parallel_gt_masks: f64,
    pub parallel_predicted_masks: f64,
    pub sequential_gt_masks: f64,
    pub sequential_predicted_masks: f64,
}

fn relative_drop(from: f64, to: f64) -> f64 {
    if from <= 0.0 {
        0.0
    } else {
        (from - to) / from
    }
}

impl PropagationReport {
    pub fn parallel_drop(&self) -> f64 {
        relative_drop(self.parallel_gt_masks, self.parallel_predicted_masks)
    }

    pub fn sequential_drop(&self) -> f64 {
        relative_drop(self.sequential_gt_masks, self.sequential_predicted_masks)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>9} {:>9} {:>8}", "model", "GT masks", "pred.", "drop");
        let _ = writeln!(
            out,
            "{:<28} {:>9.2} {:>9.2} {:>7.1}%",
            "parallel",
            100.0 * self.parallel_gt_masks,
            100.0 * self.parallel_predicted_masks,
            100.0 * self.parallel_drop()
        );
        let _ = writeln!(
            out,
            "{:<28} {:>9.2} {:>9.2} {:>7.1}%",
            "sequential (crop skeleton)",
            100.0 * self.sequential_gt_masks,
            100.0 * self.sequential_predicted_masks,
            100.0 * self.sequential_drop()
        );
        out
    }
}

/// Evaluates the trained `model` on `test` with ground-truth and predicted
/// masks, for both the parallel decoder and a sequential skeleton whose crop
/// classifier is fit on `labeled`.
pub fn error_propagation_experiment(
    model: &TadModel,
    labeled: &[PreparedVideo],
    test: &[PreparedVideo],
    decode_cfg: &DecodeConfig,
    eval_cfg: &EvalConfig,
) -> Result<PropagationReport> {
    let k = model.config().num_classes;
    let crop = CropClassifier::fit(labeled, k)?;
    let records: Vec<VideoRecord> = test.iter().map(|v| v.record.clone()).collect();
    let gt = ground_truth(&records);
    let mut dets: BTreeMap<(bool, MaskSource), Detections> = BTreeMap::new();
    for v in test {
        let pred = model.predict(&v.features())?;
        let targets = make_targets(&v.record, v.x.nrows(), k);
        let gt_masks = MaskMatrix::new(targets.gt_mask)?;
        for (source, masks) in [(MaskSource::GroundTruth, &gt_masks), (MaskSource::Predicted, &pred.masks)] {
            let par = detect(&pred.probs, masks, v.record.duration, decode_cfg);
            let seq = sequential_detect(&pred.probs, masks, &v.x, v.record.duration, &crop, decode_cfg)?;
            dets.entry((false, source)).or_default().insert(v.id().to_string(), par);
            dets.entry((true, source)).or_default().insert(v.id().to_string(), seq);
        }
    }
    let score = |seq: bool, source: MaskSource| map_report(&dets[&(seq, source)], &gt, eval_cfg).average;
    Ok(PropagationReport {
        parallel_gt_masks: score(false, MaskSource::GroundTruth),
        parallel_predicted_masks: score(false, MaskSource::Predicted),
        sequential_gt_masks: score(true, MaskSource::GroundTruth),
        sequential_predicted_masks: score(true, MaskSource::Predicted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(start: f64, end: f64, label: usize, score: f64) -> ActionInstance {
        ActionInstance { start, end, label, score }
    }

    fn seg<'a>(video: &'a str, start: f64, end: f64, score: f64) -> ScoredSegment<'a> {
        ScoredSegment { video, start, end, score }
    }

    #[test]
    fn ap_examples() {
        let gts: BTreeMap<&str, Vec<(f64, f64)>> = [("v", vec![(0.0, 10.0)])].into_iter().collect();
        assert_eq!(average_precision(&[seg("v", 0.0, 10.0, 0.5)], &gts, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        // tIoU 0.6 hit ranked first, then a miss
        let preds = [seg("v", 0.0, 6.0, 0.9), seg("v", 20.0, 30.0, 0.8)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 1.0);
        // miss first halves the precision
        let preds = [seg("v", 0.0, 6.0, 0.7), seg("v", 20.0, 30.0, 0.8)];
        assert!((average_precision(&preds, &gts, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn each_gt_matched_once() {
        let gts: BTreeMap<&str, Vec<(f64, f64)>> = [("v", vec![(0.0, 10.0)])].into_iter().collect();
        let preds = [seg("v", 0.0, 10.0, 0.9), seg("v", 0.0, 10.0, 0.8)];
        assert_eq!(average_precision(&preds, &gts, 0.5), 1.0);
        let gts2: BTreeMap<&str, Vec<(f64, f64)>> = [("v", vec![(0.0, 10.0), (0.0, 10.0)])].into_iter().collect();
        let preds = [seg("v", 0.0, 10.0, 0.9)];
        assert!((average_precision(&preds, &gts2, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_perfect_and_empty() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![inst(1.0, 4.0, 1, 1.0), inst(6.0, 9.0, 2, 1.0)]);
        gt.insert("b".into(), vec![inst(0.0, 2.0, 2, 1.0)]);
        let cfg = EvalConfig::large();
        let perfect = map_report(&gt, &gt, &cfg);
        assert!(perfect.map.iter().all(|&m| m == 1.0));
        assert_eq!(perfect.average, 1.0);
        let empty = map_report(&Detections::new(), &gt, &cfg);
        assert!(empty.map.iter().all(|&m| m == 0.0));
        let table = perfect.to_table();
        assert!(table.contains("100.00") && table.contains("Avg"));
        let back: MapReport = serde_json::from_str(&perfect.to_json()).unwrap();
        assert_eq!(back, perfect);
    }

    #[test]
    fn detection_only_class_scores_zero() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![inst(1.0, 4.0, 1, 1.0)]);
        let mut dets = gt.clone();
        dets.get_mut("a").unwrap().push(inst(5.0, 6.0, 3, 0.4));
        let r = map_report(&dets, &gt, &EvalConfig::small());
        assert_eq!(r.per_class[&3], vec![0.0; 5]);
        assert_eq!(r.average, 0.5);
    }

    #[test]
    fn grid_validation() {
        assert!(EvalConfig::large().validate().is_ok());
        assert_eq!(EvalConfig::large().tiou_grid.len(), 10);
        assert!(EvalConfig { tiou_grid: vec![0.5, 0.5] }.validate().is_err());
        assert!(EvalConfig { tiou_grid: vec![] }.validate().is_err());
    }
}
