//! Shared training plumbing: resampled per-video inputs, gradient collection,
//! and split-level inference/evaluation.

use std::collections::BTreeMap;

use crate::data::{make_targets, resample_features, SnippetFeatureSequence, VideoRecord};
use crate::decode::{self, DecodeConfig, Detections};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, MapReport};
use crate::graph::{Grads, Graph, Mat, Var};
use crate::losses::LossTargets;
use crate::model::{Prediction, TadModel};
use crate::optim::{cosine_lr, Adam};

/// One video ready for the model: `x` is the resampled input as `T x 2d` rows.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub record: VideoRecord,
    pub x: Mat,
    /// Ground-truth targets; `None` for unlabeled videos.
    pub targets: Option<LossTargets>,
}

impl PreparedVideo {
    pub fn id(&self) -> &str {
        &self.record.id
    }

    /// Features in `2d x T` orientation.
    pub fn features(&self) -> Mat {
        self.x.t().to_owned()
    }
}

/// Resamples every record's features to `t_len`; targets are built when
/// `with_targets` is set.
pub fn prepare(
    records: &[VideoRecord],
    features: &BTreeMap<String, SnippetFeatureSequence>,
    t_len: usize,
    num_classes: usize,
    with_targets: bool,
) -> Result<Vec<PreparedVideo>> {
    records
        .iter()
        .map(|r| {
            let f = features.get(&r.id).ok_or_else(|| Error::Validation {
                video: r.id.clone(),
                reason: "no feature sequence".into(),
            })?;
            let x = resample_features(f, t_len)?.t().to_owned();
            let targets = with_targets.then(|| LossTargets::from_ground_truth(&make_targets(r, t_len, num_classes)));
            Ok(PreparedVideo {
                record: r.clone(),
                x,
                targets,
            })
        })
        .collect()
}

/// Parameter gradients of one backward pass, keyed by parameter name.
pub(crate) fn named_grads(g: &Graph, grads: &Grads) -> BTreeMap<String, Mat> {
    g.params()
        .iter()
        .filter_map(|(name, &v): (&String, &Var)| grads.get(v).map(|m| (name.clone(), m.clone())))
        .collect()
}

pub(crate) fn accumulate(into: &mut BTreeMap<String, Mat>, from: BTreeMap<String, Mat>, weight: f64) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => acc.scaled_add(weight, &g),
            None => {
                into.insert(name, g * weight);
            }
        }
    }
}

/// Applies one optimizer step with a cosine schedule.
pub(crate) fn apply(model: &mut TadModel, adam: &mut Adam, grads: &BTreeMap<String, Mat>, base_lr: f64, step: usize, total: usize) {
    let lr = cosine_lr(base_lr, step, total);
    adam.step(model.params_mut(), grads, lr);
}

pub fn predict_all(model: &TadModel, videos: &[PreparedVideo]) -> Result<Vec<Prediction>> {
    videos.iter().map(|v| model.predict(&v.features())).collect()
}

pub fn detect_all(model: &TadModel, videos: &[PreparedVideo], cfg: &DecodeConfig) -> Result<Detections> {
    let mut out = Detections::new();
    for v in videos {
        let p = model.predict(&v.features())?;
        out.insert(v.id().to_string(), decode::detect(&p.probs, &p.masks, v.record.duration, cfg));
    }
    Ok(out)
}

pub fn evaluate(model: &TadModel, videos: &[PreparedVideo], decode_cfg: &DecodeConfig, eval_cfg: &EvalConfig) -> Result<MapReport> {
    let dets = detect_all(model, videos, decode_cfg)?;
    let records: Vec<VideoRecord> = videos.iter().map(|v| v.record.clone()).collect();
    Ok(eval::map_report(&dets, &eval::ground_truth(&records), eval_cfg))
}

/// Validation data and settings used for per-epoch mAP.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub videos: &'a [PreparedVideo],
    pub decode: &'a DecodeConfig,
    pub eval: &'a EvalConfig,
}
