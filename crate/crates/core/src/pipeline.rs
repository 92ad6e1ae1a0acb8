//! End-to-end runs shared by the command line and the experiment suite:
//! split preparation, Stage-I pre-training, Stage-II fine-tuning variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_from_manifest, AnnotationSet, SnippetFeatureSequence, SplitManifest, SyntheticDataset};
use crate::error::Result;
use crate::eval::MapReport;
use crate::graph::Mat;
use crate::model::TadModel;
use crate::params::ParamStore;
use crate::pretrain::{self, PretrainEpoch};
use crate::semisup::{self, EpochMetrics};
use crate::train::{self, PreparedVideo, Validation};

/// Resampled labeled, unlabeled and test videos.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub labeled: Vec<PreparedVideo>,
    pub unlabeled: Vec<PreparedVideo>,
    pub test: Vec<PreparedVideo>,
}

impl PreparedSplit {
    pub fn new(
        annotations: &AnnotationSet,
        features: &BTreeMap<String, SnippetFeatureSequence>,
        manifest: &SplitManifest,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let split = split_from_manifest(annotations, manifest);
        let (t, k) = (cfg.model.t_len, cfg.model.num_classes);
        Ok(Self {
            labeled: train::prepare(&split.labeled, features, t, k, true)?,
            unlabeled: train::prepare(&split.unlabeled, features, t, k, false)?,
            test: train::prepare(&split.test, features, t, k, true)?,
        })
    }

    pub fn from_synthetic(ds: &SyntheticDataset, cfg: &RunConfig) -> Result<Self> {
        Self::new(&ds.annotations, &ds.features, &ds.manifest, cfg)
    }

    /// Features of every training video (labeled and unlabeled), `2d x T` each.
    pub fn training_features(&self) -> Vec<Mat> {
        self.labeled.iter().chain(&self.unlabeled).map(PreparedVideo::features).collect()
    }
}

/// Stage I on all training videos, annotations unused.
pub fn run_pretrain(
    cfg: &RunConfig,
    split: &PreparedSplit,
    seed: u64,
    on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<(TadModel, Vec<PretrainEpoch>)> {
    let mut model = TadModel::new(cfg.model.clone(), seed)?;
    let history = pretrain::pretrain(&mut model, &split.training_features(), &cfg.pretrain, seed, on_epoch)?;
    Ok((model, history))
}

/// How Stage II is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Random initialization, labeled videos only.
    LabeledOnly,
    /// Random initialization, labeled plus pseudo-labeled videos.
    PseudoOnly,
    /// Stage-I initialization plus pseudo labels.
    Full,
}

impl Variant {
    pub fn uses_pretraining(self) -> bool {
        self == Variant::Full
    }

    pub fn uses_pseudo_labels(self) -> bool {
        self != Variant::LabeledOnly
    }
}

/// Stage II. `pretrained` is a Stage-I checkpoint (classifier excluded on load);
/// `None` means random initialization.
pub fn run_finetune(
    cfg: &RunConfig,
    split: &PreparedSplit,
    pretrained: Option<&ParamStore>,
    use_pseudo: bool,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TadModel, Vec<EpochMetrics>)> {
    let mut model = TadModel::new(cfg.model.clone(), seed)?;
    if let Some(ckpt) = pretrained {
        pretrain::load_pretrained(&mut model, ckpt)?;
    }
    let mut ft = cfg.finetune.clone();
    ft.use_pseudo = use_pseudo;
    let validation = Validation {
        videos: &split.test,
        decode: &cfg.decode,
        eval: &cfg.eval,
    };
    let history = semisup::finetune(&mut model, &split.labeled, &split.unlabeled, Some(validation), &ft, seed, on_epoch)?;
    Ok((model, history))
}

/// Result of one variant run.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: TadModel,
    pub report: MapReport,
}

/// Runs one variant end to end and evaluates on the test split. A Stage-I
/// checkpoint may be passed in to share pre-training between variants.
pub fn run_variant(
    cfg: &RunConfig,
    split: &PreparedSplit,
    variant: Variant,
    pretrained: Option<&ParamStore>,
    seed: u64,
) -> Result<VariantRun> {
    let owned;
    let ckpt = match (variant.uses_pretraining(), pretrained) {
        (false, _) => None,
        (true, Some(p)) => Some(p),
        (true, None) => {
            owned = run_pretrain(cfg, split, seed, |_| {})?.0.params().clone();
            Some(&owned)
        }
    };
    let (model, _) = run_finetune(cfg, split, ckpt, variant.uses_pseudo_labels(), seed, |_| {})?;
    let report = train::evaluate(&model, &split.test, &cfg.decode, &cfg.eval)?;
    Ok(VariantRun { variant, model, report })
}
