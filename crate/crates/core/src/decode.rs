//! Inference decoding: confident anchors from `P`, threshold sweep over each
//! anchor's mask column, score fusion, and per-class Gaussian SoftNMS.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::snippet_span_to_seconds;
use crate::error::{config_err, Result};
use crate::eval::tiou;
use crate::heads::{ClassScoreMatrix, MaskMatrix};

/// A detection or ground-truth segment in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    /// 1-based class index.
    pub label: usize,
    pub score: f64,
}

impl ActionInstance {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub class_threshold: f64,
    pub mask_thresholds: Vec<f64>,
    pub top_snippets: usize,
    pub softnms_threshold: f64,
    pub softnms_sigma: f64,
    pub max_outputs: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.3,
            mask_thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            top_snippets: 100,
            softnms_threshold: 0.6,
            softnms_sigma: 0.5,
            max_outputs: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_thresholds.is_empty() || self.mask_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(config_err("mask_thresholds must be nonempty and inside (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.class_threshold) {
            return Err(config_err("class_threshold must be in [0, 1)"));
        }
        if self.softnms_sigma <= 0.0 || !(0.0..=1.0).contains(&self.softnms_threshold) {
            return Err(config_err("softnms_sigma must be > 0 and softnms_threshold in [0, 1]"));
        }
        if self.top_snippets == 0 || self.max_outputs == 0 {
            return Err(config_err("top_snippets and max_outputs must be >= 1"));
        }
        Ok(())
    }
}

/// Maximal run of ones containing `t`, else the longest run (earliest on ties).
fn anchor_run(bin: &[bool], t: usize) -> Option<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bin.len() {
        if bin[i] {
            let a = i;
            while i < bin.len() && bin[i] {
                i += 1;
            }
            runs.push((a, i - 1));
        } else {
            i += 1;
        }
    }
    runs.iter()
        .find(|&&(a, b)| a <= t && t <= b)
        .or_else(|| runs.iter().rev().max_by_key(|&&(a, b)| b - a))
        .copied()
}

/// A decoded snippet run `[first, last]` with its class and fused score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnippetRun {
    pub first: usize,
    pub last: usize,
    pub label: usize,
    pub score: f64,
}

/// Candidate runs before conversion to seconds, deduplicated on `(first, last, label)`.
pub fn candidate_runs(p: &ClassScoreMatrix, m: &MaskMatrix, cfg: &DecodeConfig) -> Vec<SnippetRun> {
    let t_len = p.len();
    let mut anchors: Vec<(usize, usize, f64)> = (0..t_len)
        .map(|t| {
            let (label, prob) = p.best_action(t);
            (t, label, prob)
        })
        .filter(|&(_, _, prob)| prob > cfg.class_threshold)
        .collect();
    anchors.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    anchors.truncate(cfg.top_snippets);

    let mut best: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for (t, label, prob) in anchors {
        let col = m.column(t);
        let peak = col.iter().cloned().fold(0.0, f64::max);
        let score = prob * peak;
        for &theta in &cfg.mask_thresholds {
            let bin: Vec<bool> = col.iter().map(|&v| v >= theta).collect();
            if let Some((a, b)) = anchor_run(&bin, t) {
                let slot = best.entry((a, b, label)).or_insert(score);
                *slot = slot.max(score);
            }
        }
    }
    best.into_iter()
        .map(|((first, last, label), score)| SnippetRun {
            first,
            last,
            label,
            score,
        })
        .collect()
}

/// Converts a run to seconds with the snippet-center convention.
pub fn run_to_instance(run: &SnippetRun, t_len: usize, duration: f64) -> ActionInstance {
    let (start, end) = snippet_span_to_seconds(run.first, run.last, t_len, duration);
    ActionInstance {
        start,
        end: end.min(duration),
        label: run.label,
        score: run.score,
    }
}

/// Candidate detections for one video before suppression.
pub fn decode_instances(p: &ClassScoreMatrix, m: &MaskMatrix, duration: f64, cfg: &DecodeConfig) -> Vec<ActionInstance> {
    candidate_runs(p, m, cfg)
        .iter()
        .map(|r| run_to_instance(r, p.len(), duration))
        .collect()
}

/// Per-class Gaussian SoftNMS. A candidate whose score is decayed below
/// `softnms_threshold` is dropped; candidates never decayed are always kept.
pub fn soft_nms(candidates: &[ActionInstance], cfg: &DecodeConfig) -> Vec<ActionInstance> {
    let mut pool: Vec<ActionInstance> = candidates.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let top = pool
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.score
                    .total_cmp(&b.1.score)
                    .then(b.1.start.total_cmp(&a.1.start))
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .unwrap();
        let cur = pool.swap_remove(top);
        pool.retain_mut(|c| {
            if c.label != cur.label {
                return true;
            }
            let iou = tiou((cur.start, cur.end), (c.start, c.end));
            let decay = (-(iou * iou) / cfg.softnms_sigma).exp();
            if decay < 1.0 {
                c.score *= decay;
                c.score >= cfg.softnms_threshold
            } else {
                true
            }
        });
        kept.push(cur);
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
    kept.truncate(cfg.max_outputs);
    kept
}

/// `decode_instances` followed by `soft_nms`.
pub fn detect(p: &ClassScoreMatrix, m: &MaskMatrix, duration: f64, cfg: &DecodeConfig) -> Vec<ActionInstance> {
    soft_nms(&decode_instances(p, m, duration, cfg), cfg)
}

/// Detections for a split, keyed by video id.
pub type Detections = BTreeMap<String, Vec<ActionInstance>>;

#[derive(Serialize, Deserialize)]
struct JsonDetection {
    segment: [f64; 2],
    label: String,
    score: f64,
}

/// Writes `{video_id: [{segment, label, score}]}`; `labels[k - 1]` names class `k`.
pub fn write_detections(path: &Path, dets: &Detections, labels: &[String]) -> Result<()> {
    let out: BTreeMap<&String, Vec<JsonDetection>> = dets
        .iter()
        .map(|(id, list)| {
            let items = list
                .iter()
                .map(|d| JsonDetection {
                    segment: [d.start, d.end],
                    label: labels.get(d.label - 1).cloned().unwrap_or_else(|| d.label.to_string()),
                    score: d.score,
                })
                .collect();
            (id, items)
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

/// Reads a detection file; labels unknown to `labels` are rejected.
pub fn read_detections(path: &Path, labels: &[String]) -> Result<Detections> {
    if !path.exists() {
        return Err(crate::Error::Missing(path.to_path_buf()));
    }
    let raw: BTreeMap<String, Vec<JsonDetection>> =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| crate::Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    raw.into_iter()
        .map(|(id, list)| {
            let items = list
                .into_iter()
                .map(|d| {
                    let label = labels.iter().position(|l| *l == d.label).ok_or_else(|| crate::Error::Parse {
                        path: path.to_path_buf(),
                        reason: format!("unknown label `{}`", d.label),
                    })?;
                    Ok(ActionInstance {
                        start: d.segment[0],
                        end: d.segment[1],
                        label: label + 1,
                        score: d.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id, items))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mat;
    use ndarray::array;

    fn inst(start: f64, end: f64, label: usize, score: f64) -> ActionInstance {
        ActionInstance { start, end, label, score }
    }

    /// P with class 1 at `probs[t]` and the rest on background.
    fn p_from(probs: &[f64]) -> ClassScoreMatrix {
        let t = probs.len();
        ClassScoreMatrix::new(Mat::from_shape_fn((2, t), |(k, c)| if k == 0 { probs[c] } else { 1.0 - probs[c] })).unwrap()
    }

    #[test]
    fn hand_decode() {
        let p = p_from(&[0.0, 0.0, 0.9, 0.0, 0.0]);
        let mut m = Mat::zeros((5, 5));
        m.column_mut(2).assign(&array![0.1, 0.8, 0.9, 0.8, 0.1]);
        let cfg = DecodeConfig {
            mask_thresholds: vec![0.5],
            ..DecodeConfig::default()
        };
        let out = decode_instances(&p, &MaskMatrix::new(m).unwrap(), 5.0, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start, out[0].end, out[0].label), (1.0, 4.0, 1));
        assert!((out[0].score - 0.81).abs() < 1e-12);
    }

    #[test]
    fn low_confidence_gives_nothing_and_duplicates_merge() {
        let m = MaskMatrix::new(Mat::from_elem((4, 4), 0.95)).unwrap();
        assert!(decode_instances(&p_from(&[0.3, 0.2, 0.1, 0.0]), &m, 4.0, &DecodeConfig::default()).is_empty());
        let out = decode_instances(&p_from(&[0.0, 0.9, 0.0, 0.0]), &m, 4.0, &DecodeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start, out[0].end), (0.0, 4.0));
    }

    #[test]
    fn anchor_outside_runs_takes_longest() {
        assert_eq!(anchor_run(&[true, false, false, true, true, false], 1), Some((3, 4)));
        assert_eq!(anchor_run(&[true, true, false, true, true], 2), Some((0, 1)));
        assert_eq!(anchor_run(&[true, false, true, true], 0), Some((0, 0)));
        assert_eq!(anchor_run(&[false, false], 0), None);
    }

    #[test]
    fn soft_nms_examples() {
        let cfg = DecodeConfig::default();
        let one = vec![inst(0.0, 1.0, 1, 0.3)];
        assert_eq!(soft_nms(&one, &cfg), one);
        let disjoint = vec![inst(0.0, 1.0, 1, 0.9), inst(2.0, 3.0, 1, 0.8)];
        assert_eq!(soft_nms(&disjoint, &cfg), disjoint);
        let same = vec![inst(0.0, 1.0, 1, 0.9), inst(0.0, 1.0, 1, 0.8)];
        assert_eq!(soft_nms(&same, &cfg), vec![same[0].clone()]);
        let keep_all = DecodeConfig {
            softnms_threshold: 0.0,
            ..cfg.clone()
        };
        let out = soft_nms(&same, &keep_all);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.108).abs() < 1e-3);
        // other classes are untouched
        let mixed = vec![inst(0.0, 1.0, 1, 0.9), inst(0.0, 1.0, 2, 0.8)];
        assert_eq!(soft_nms(&mixed, &cfg).len(), 2);
    }

    #[test]
    fn detection_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        let labels = vec!["jump".to_string(), "run".to_string()];
        let mut dets = Detections::new();
        dets.insert("v1".into(), vec![inst(1.0, 2.5, 2, 0.7)]);
        write_detections(&path, &dets, &labels).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"run\""));
        assert_eq!(read_detections(&path, &labels).unwrap(), dets);
    }
}
