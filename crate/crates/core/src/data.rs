//! Annotations, feature files, synthetic data and per-snippet training targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::Mat;

/// One annotated action instance. `label` is a dense class index in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl ActionSegment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration: f64,
    pub segments: Vec<ActionSegment>,
    pub feature_path: String,
}

impl VideoRecord {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            video: self.id.clone(),
            reason,
        };
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(fail(format!("duration {} must be positive", self.duration)));
        }
        for s in &self.segments {
            if !(s.start >= 0.0) || !(s.end > s.start) {
                return Err(fail(format!("segment [{}, {}] is empty or negative", s.start, s.end)));
            }
            if s.end > self.duration + 1e-9 {
                return Err(fail(format!(
                    "segment [{}, {}] exceeds duration {}",
                    s.start, s.end, self.duration
                )));
            }
            if s.label == 0 || num_classes.is_some_and(|k| s.label > k) {
                return Err(fail(format!("label index {} out of range", s.label)));
            }
        }
        Ok(())
    }
}

/// Records plus the label dictionary (`labels[i]` is the name of class `i + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<VideoRecord>,
    pub labels: Vec<String>,
}

impl AnnotationSet {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<VideoRecord>,
    /// Segments are always empty here.
    pub unlabeled: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

impl DatasetSplit {
    pub fn label_fraction(&self) -> f64 {
        let n = self.labeled.len() + self.unlabeled.len();
        if n == 0 {
            0.0
        } else {
            self.labeled.len() as f64 / n as f64
        }
    }
}

/// Split manifest written next to the annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fraction: f64,
}

impl SplitManifest {
    /// Re-draws the labeled subset of the training pool at `fraction`; the
    /// test split is untouched.
    pub fn with_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(config_err(format!("label fraction must be in (0, 1], got {fraction}")));
        }
        let mut pool: Vec<String> = self.labeled.iter().chain(&self.unlabeled).cloned().collect();
        pool.sort();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len().max(1));
        let mut labeled = pool[..n.min(pool.len())].to_vec();
        let mut unlabeled = pool[n.min(pool.len())..].to_vec();
        labeled.sort();
        unlabeled.sort();
        Ok(Self {
            labeled,
            unlabeled,
            test: self.test.clone(),
            seed,
            fraction,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    segment: [f64; 2],
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawVideo {
    duration_second: f64,
    annotations: Vec<RawAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_path: Option<String>,
}

/// Reads an ActivityNet-style annotation file
/// `{video_id: {duration_second, annotations: [{segment: [s, e], label}]}}`.
///
/// Label names are mapped to dense indices `1..=K` in sorted order. Missing
/// `feature_path` entries default to `features/<id>.bin` relative to the file.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let raw: BTreeMap<String, RawVideo> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_annotations(raw, base)
}

fn parse_annotations(raw: BTreeMap<String, RawVideo>, base: &Path) -> Result<AnnotationSet> {
    let labels: Vec<String> = raw
        .values()
        .flat_map(|v| v.annotations.iter().map(|a| a.label.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i + 1)).collect();

    let mut records = Vec::with_capacity(raw.len());
    for (id, v) in &raw {
        let segments = v
            .annotations
            .iter()
            .map(|a| ActionSegment {
                start: a.segment[0],
                end: a.segment[1],
                label: index[a.label.as_str()],
            })
            .collect();
        let feature_path = match &v.feature_path {
            Some(p) => p.clone(),
            None => base.join("features").join(format!("{id}.bin")).to_string_lossy().into_owned(),
        };
        let record = VideoRecord {
            id: id.clone(),
            duration: v.duration_second,
            segments,
            feature_path,
        };
        record.validate(Some(labels.len()))?;
        records.push(record);
    }
    Ok(AnnotationSet { records, labels })
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let raw: BTreeMap<String, RawVideo> = set
        .records
        .iter()
        .map(|r| {
            let v = RawVideo {
                duration_second: r.duration,
                annotations: r
                    .segments
                    .iter()
                    .map(|s| RawAnnotation {
                        segment: [s.start, s.end],
                        label: set.labels[s.label - 1].clone(),
                    })
                    .collect(),
                feature_path: None,
            };
            (r.id.clone(), v)
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

/// Per-video snippet features `F = [X_rgb; X_flow]`, shape `(2d, T_raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatureSequence {
    values: Mat,
}

impl SnippetFeatureSequence {
    pub fn new(values: Mat) -> Result<Self> {
        if !values.nrows().is_multiple_of(2) || values.nrows() == 0 {
            return Err(Error::Shape(format!(
                "feature rows must be 2d for some d >= 1, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::Shape("feature sequence has no snippets".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self { values })
    }

    pub fn from_streams(rgb: &Mat, flow: &Mat) -> Result<Self> {
        if rgb.dim() != flow.dim() {
            return Err(Error::Shape("rgb and flow streams differ in shape".into()));
        }
        let v = ndarray::concatenate(ndarray::Axis(0), &[rgb.view(), flow.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(v)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn into_values(self) -> Mat {
        self.values
    }

    pub fn half_dim(&self) -> usize {
        self.values.nrows() / 2
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    dims: [usize; 2],
    dtype: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes raw little-endian `f32` values, row-major `(2d, T_raw)`, plus a
/// `{dims, dtype}` JSON sidecar with the same stem.
pub fn write_features(path: &Path, f: &SnippetFeatureSequence) -> Result<()> {
    let v = f.values();
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v.iter() {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = FeatureHeader {
        dims: [v.nrows(), v.ncols()],
        dtype: "float32".into(),
    };
    fs::write(sidecar(path), serde_json::to_string(&header)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<SnippetFeatureSequence> {
    let head_path = sidecar(path);
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    if !head_path.exists() {
        return Err(Error::Missing(head_path));
    }
    let header: FeatureHeader = serde_json::from_str(&fs::read_to_string(&head_path)?).map_err(|e| Error::Parse {
        path: head_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "float32" {
        return Err(Error::Parse {
            path: head_path,
            reason: format!("unsupported dtype {}", header.dtype),
        });
    }
    let bytes = fs::read(path)?;
    let [rows, cols] = header.dims;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", rows * cols * 4, bytes.len()),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
    SnippetFeatureSequence::new(m)
}

/// Linear resampling onto `t` equidistant snippets; column `i` samples raw
/// position `i * (T_raw - 1) / (t - 1)`.
pub fn resample_features(f: &SnippetFeatureSequence, t: usize) -> Result<Mat> {
    if t < 2 {
        return Err(config_err(format!("target length T must be >= 2, got {t}")));
    }
    let src = f.values();
    let (rows, raw) = src.dim();
    let mut out = Mat::zeros((rows, t));
    for i in 0..t {
        let pos = if raw == 1 {
            0.0
        } else {
            i as f64 * (raw - 1) as f64 / (t - 1) as f64
        };
        let lo = (pos.floor() as usize).min(raw - 1);
        let hi = (lo + 1).min(raw - 1);
        let w = pos - lo as f64;
        for r in 0..rows {
            out[[r, i]] = if w == 0.0 {
                src[[r, lo]]
            } else {
                (1.0 - w) * src[[r, lo]] + w * src[[r, hi]]
            };
        }
    }
    Ok(out)
}

/// Center time of snippet `t` in a video of `duration` seconds sampled at `len` snippets.
pub fn snippet_center(t: usize, len: usize, duration: f64) -> f64 {
    (t as f64 + 0.5) / len as f64 * duration
}

/// Snippet run `[first, last]` (inclusive) mapped back to seconds.
pub fn snippet_span_to_seconds(first: usize, last: usize, len: usize, duration: f64) -> (f64, f64) {
    (
        first as f64 / len as f64 * duration,
        (last + 1) as f64 / len as f64 * duration,
    )
}

/// Per-snippet supervision derived from segment annotations.
///
/// `gt_mask` is `(T, T)`; column `t` is the foreground mask of the instance
/// covering snippet `t` (all zeros for background snippets).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTargets {
    pub class_label: Vec<usize>,
    pub gt_mask: Mat,
    pub fg_indices: Vec<usize>,
    pub bg_indices: Vec<usize>,
    pub num_classes: usize,
}

impl TrainTargets {
    pub fn len(&self) -> usize {
        self.class_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_label.is_empty()
    }

    pub fn background(&self) -> usize {
        self.num_classes + 1
    }

    pub fn is_foreground(&self, t: usize) -> bool {
        self.class_label[t] <= self.num_classes
    }
}

pub fn make_targets(record: &VideoRecord, t_len: usize, num_classes: usize) -> TrainTargets {
    let centers: Vec<f64> = (0..t_len).map(|t| snippet_center(t, t_len, record.duration)).collect();
    // earliest start wins on overlap; stable sort keeps file order on ties
    let mut order: Vec<usize> = (0..record.segments.len()).collect();
    order.sort_by(|&a, &b| record.segments[a].start.total_cmp(&record.segments[b].start));

    let covers = |seg: &ActionSegment, c: f64| seg.start <= c && c < seg.end;
    let mut class_label = vec![num_classes + 1; t_len];
    let mut owner: Vec<Option<usize>> = vec![None; t_len];
    for (t, &c) in centers.iter().enumerate() {
        if let Some(&j) = order.iter().find(|&&j| covers(&record.segments[j], c)) {
            class_label[t] = record.segments[j].label;
            owner[t] = Some(j);
        }
    }

    let mut gt_mask = Mat::zeros((t_len, t_len));
    for t in 0..t_len {
        if let Some(j) = owner[t] {
            let seg = &record.segments[j];
            for (i, &c) in centers.iter().enumerate() {
                if covers(seg, c) {
                    gt_mask[[i, t]] = 1.0;
                }
            }
        }
    }
    let fg_indices = (0..t_len).filter(|&t| owner[t].is_some()).collect();
    let bg_indices = (0..t_len).filter(|&t| owner[t].is_none()).collect();
    TrainTargets {
        class_label,
        gt_mask,
        fg_indices,
        bg_indices,
        num_classes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Training pool size (labeled + unlabeled).
    pub num_videos: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub t_raw: usize,
    /// Feature half-dimension `d`; files carry `2d` rows.
    pub half_dim: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance length bounds in raw snippets.
    pub min_length: usize,
    pub max_length: usize,
    /// Segment boundaries are placed on multiples of this many raw snippets.
    pub boundary_quantum: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    /// Standard deviation of per-snippet Gaussian noise.
    pub noise: f64,
    /// Standard deviation of a per-video additive offset shared by all snippets.
    pub video_shift: f64,
    pub label_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            num_test: 60,
            num_classes: 5,
            t_raw: 120,
            half_dim: 16,
            min_instances: 1,
            max_instances: 3,
            min_length: 12,
            max_length: 42,
            boundary_quantum: 3,
            min_duration: 60.0,
            max_duration: 180.0,
            noise: 1.0,
            video_shift: 0.3,
            label_fraction: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(config_err(format!(
                "label fraction must be in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if self.num_videos == 0 || self.num_classes == 0 || self.t_raw == 0 || self.half_dim == 0 {
            return Err(config_err("num_videos, num_classes, t_raw and half_dim must be positive"));
        }
        if self.min_instances > self.max_instances || self.min_length == 0 || self.min_length > self.max_length {
            return Err(config_err("instance count/length ranges are inverted or empty"));
        }
        if self.boundary_quantum == 0 || self.max_length > self.t_raw {
            return Err(config_err("boundary_quantum must be >= 1 and max_length <= t_raw"));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return Err(config_err("duration range must be positive and ordered"));
        }
        if self.noise < 0.0 || self.video_shift < 0.0 {
            return Err(config_err("noise levels must be nonnegative"));
        }
        Ok(())
    }
}

/// A fully materialized synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub annotations: AnnotationSet,
    pub features: BTreeMap<String, SnippetFeatureSequence>,
    pub manifest: SplitManifest,
    /// Class prototypes (`K` rows) followed by the background prototype.
    pub prototypes: Mat,
}

impl SyntheticDataset {
    pub fn split(&self) -> DatasetSplit {
        split_from_manifest(&self.annotations, &self.manifest)
    }

    pub fn feature(&self, id: &str) -> &SnippetFeatureSequence {
        &self.features[id]
    }
}

pub fn split_from_manifest(annotations: &AnnotationSet, manifest: &SplitManifest) -> DatasetSplit {
    let by_id: BTreeMap<&str, &VideoRecord> = annotations.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let pick = |ids: &[String], hide: bool| -> Vec<VideoRecord> {
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()))
            .map(|r| {
                let mut r = (*r).clone();
                if hide {
                    r.segments.clear();
                }
                r
            })
            .collect()
    };
    DatasetSplit {
        labeled: pick(&manifest.labeled, false),
        unlabeled: pick(&manifest.unlabeled, true),
        test: pick(&manifest.test, false),
    }
}

fn plant_segments<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let q = cfg.boundary_quantum;
    let slots = cfg.t_raw / q;
    let min_len = cfg.min_length.div_ceil(q).max(1);
    let max_len = (cfg.max_length / q).max(min_len);
    let mut n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut lens: Vec<usize> = (0..n).map(|_| rng.gen_range(min_len..=max_len)).collect();
    // inner gaps of at least one slot keep instances separable
    while n > 0 && lens.iter().sum::<usize>() + (n - 1) > slots {
        lens.pop();
        n -= 1;
    }
    if n == 0 {
        return Vec::new();
    }
    let free = slots - lens.iter().sum::<usize>() - (n - 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (j, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut + usize::from(j > 0);
        prev_cut = cut;
        let label = rng.gen_range(1..=cfg.num_classes);
        out.push((pos * q, (pos + len) * q, label));
        pos += len;
    }
    out
}

/// Builds a deterministic synthetic dataset. Every class has a fixed random
/// prototype; foreground snippets are `prototype + noise`, background snippets
/// use a shared background prototype.
pub fn synthesize(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 2 * cfg.half_dim;
    let prototypes = Mat::from_shape_fn((cfg.num_classes + 1, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<String> = (1..=cfg.num_classes).map(|k| format!("action_{k:03}")).collect();

    let total = cfg.num_videos + cfg.num_test;
    let mut records = Vec::with_capacity(total);
    let mut features = BTreeMap::new();
    for v in 0..total {
        let id = format!("video_{v:05}");
        let duration = if cfg.max_duration > cfg.min_duration {
            rng.gen_range(cfg.min_duration..cfg.max_duration)
        } else {
            cfg.min_duration
        };
        let planted = plant_segments(cfg, &mut rng);
        let unit = duration / cfg.t_raw as f64;
        let segments = planted
            .iter()
            .map(|&(a, b, label)| ActionSegment {
                start: a as f64 * unit,
                end: b as f64 * unit,
                label,
            })
            .collect();

        let shift: Array1<f64> = Array1::from_shape_fn(dim, |_| cfg.video_shift * rng.sample::<f64, _>(StandardNormal));
        let mut values = Mat::zeros((dim, cfg.t_raw));
        for j in 0..cfg.t_raw {
            let class = planted
                .iter()
                .find(|&&(a, b, _)| a <= j && j < b)
                .map(|&(_, _, l)| l - 1)
                .unwrap_or(cfg.num_classes);
            for r in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                values[[r, j]] = prototypes[[class, r]] + shift[r] + cfg.noise * noise;
            }
        }
        features.insert(id.clone(), SnippetFeatureSequence::new(values)?);
        records.push(VideoRecord {
            feature_path: format!("features/{id}.bin"),
            id,
            duration,
            segments,
        });
    }

    let mut train_ids: Vec<String> = records[..cfg.num_videos].iter().map(|r| r.id.clone()).collect();
    train_ids.shuffle(&mut rng);
    let n_labeled = ((cfg.label_fraction * cfg.num_videos as f64).round() as usize).clamp(1, cfg.num_videos);
    let mut labeled = train_ids[..n_labeled].to_vec();
    let mut unlabeled = train_ids[n_labeled..].to_vec();
    labeled.sort();
    unlabeled.sort();
    let test = records[cfg.num_videos..].iter().map(|r| r.id.clone()).collect();

    Ok(SyntheticDataset {
        annotations: AnnotationSet { records, labels },
        features,
        manifest: SplitManifest {
            labeled,
            unlabeled,
            test,
            seed,
            fraction: cfg.label_fraction,
        },
        prototypes,
    })
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "split.json";

/// Generates a synthetic dataset and writes annotations, features and the
/// split manifest under `dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, dir: &Path) -> Result<SyntheticDataset> {
    let ds = synthesize(cfg, seed)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

pub fn write_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("features"))?;
    write_annotations(&dir.join(ANNOTATION_FILE), &ds.annotations)?;
    for (id, f) in &ds.features {
        write_features(&dir.join("features").join(format!("{id}.bin")), f)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

/// Dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub annotations: AnnotationSet,
    pub manifest: SplitManifest,
    pub features: BTreeMap<String, SnippetFeatureSequence>,
}

impl LoadedDataset {
    pub fn split(&self) -> DatasetSplit {
        split_from_manifest(&self.annotations, &self.manifest)
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let annotations = load_annotations(&dir.join(ANNOTATION_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Missing(manifest_path));
    }
    let manifest: SplitManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    let mut features = BTreeMap::new();
    for r in &annotations.records {
        let p = Path::new(&r.feature_path);
        let p = if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
        features.insert(r.id.clone(), read_features(&p)?);
    }
    Ok(LoadedDataset {
        annotations,
        manifest,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_json(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("ann.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_single_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(
            dir.path(),
            r#"{"v1": {"duration_second": 10.0, "annotations": [{"segment": [2.0, 5.0], "label": "jump"}]}}"#,
        );
        let set = load_annotations(&p).unwrap();
        assert_eq!(set.records.len(), 1);
        assert_eq!(set.records[0].segments.len(), 1);
        assert_eq!(set.records[0].segments[0].label, 1);
        assert_eq!(set.labels, vec!["jump".to_string()]);
    }

    #[test]
    fn empty_interval_is_rejected_with_video_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(
            dir.path(),
            r#"{"clip_7": {"duration_second": 10.0, "annotations": [{"segment": [5.0, 5.0], "label": "jump"}]}}"#,
        );
        match load_annotations(&p) {
            Err(Error::Validation { video, .. }) => assert_eq!(video, "clip_7"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(dir.path(), "{not json");
        assert!(matches!(load_annotations(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn shared_labels_share_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_json(
            dir.path(),
            r#"{"a": {"duration_second": 10.0, "annotations": [{"segment": [1.0, 2.0], "label": "jump"}, {"segment": [3.0, 4.0], "label": "bike"}]},
                "b": {"duration_second": 8.0, "annotations": [{"segment": [0.0, 2.0], "label": "jump"}]}}"#,
        );
        let set = load_annotations(&p).unwrap();
        let a = set.get("a").unwrap();
        let b = set.get("b").unwrap();
        assert_eq!(a.segments[0].label, b.segments[0].label);
        assert_ne!(a.segments[0].label, a.segments[1].label);
    }

    #[test]
    fn resample_identity_midpoint_and_stride() {
        let f = SnippetFeatureSequence::new(array![[0.0, 2.0], [1.0, 1.0]]).unwrap();
        let out = resample_features(&f, 3).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.0, 1.0, 2.0]);

        let g = SnippetFeatureSequence::new(array![[0., 1., 2., 3., 4., 5., 6.], [0.; 7]].mapv(|x: f64| x)).unwrap();
        let out = resample_features(&g, 4).unwrap();
        for (a, b) in out.row(0).iter().zip([0.0, 2.0, 4.0, 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = resample_features(&g, 7).unwrap();
        assert_eq!(&same, g.values());
        assert!(matches!(resample_features(&g, 1), Err(Error::Config(_))));
    }

    #[test]
    fn targets_for_single_segment() {
        let r = VideoRecord {
            id: "v".into(),
            duration: 10.0,
            segments: vec![ActionSegment {
                start: 2.0,
                end: 5.0,
                label: 1,
            }],
            feature_path: String::new(),
        };
        let tg = make_targets(&r, 10, 3);
        assert_eq!(tg.fg_indices, vec![2, 3, 4]);
        assert_eq!(tg.class_label[2], 1);
        assert_eq!(tg.class_label[0], 4);
        for t in 0..10 {
            for i in 0..10 {
                let want = if (2..5).contains(&t) && (2..5).contains(&i) { 1.0 } else { 0.0 };
                assert_eq!(tg.gt_mask[[i, t]], want, "i={i} t={t}");
            }
        }
    }

    #[test]
    fn background_only_and_full_coverage() {
        let mut r = VideoRecord {
            id: "v".into(),
            duration: 6.0,
            segments: vec![],
            feature_path: String::new(),
        };
        let tg = make_targets(&r, 6, 2);
        assert!(tg.class_label.iter().all(|&c| c == 3));
        assert!(tg.gt_mask.iter().all(|&v| v == 0.0));
        assert!(tg.fg_indices.is_empty());

        r.segments.push(ActionSegment {
            start: 0.0,
            end: 6.0,
            label: 2,
        });
        let tg = make_targets(&r, 6, 2);
        assert!(tg.bg_indices.is_empty());
        assert!(tg.gt_mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlapping_segments_resolve_to_earliest_start() {
        let r = VideoRecord {
            id: "v".into(),
            duration: 10.0,
            segments: vec![
                ActionSegment {
                    start: 4.0,
                    end: 8.0,
                    label: 2,
                },
                ActionSegment {
                    start: 1.0,
                    end: 6.0,
                    label: 1,
                },
            ],
            feature_path: String::new(),
        };
        let tg = make_targets(&r, 10, 2);
        assert_eq!(tg.class_label[5], 1);
        assert_eq!(tg.class_label[6], 2);
        assert_eq!(tg.gt_mask[[5, 5]], 1.0);
        assert_eq!(tg.gt_mask[[6, 5]], 0.0);
    }

    #[test]
    fn synthetic_split_counts_and_zero_noise() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            video_shift: 0.0,
            num_test: 4,
            ..SyntheticConfig::default()
        };
        let ds = synthesize(&cfg, 11).unwrap();
        assert_eq!(ds.manifest.labeled.len(), 20);
        assert_eq!(ds.manifest.unlabeled.len(), 180);
        let split = ds.split();
        assert!(split.unlabeled.iter().all(|r| r.segments.is_empty()));
        let labeled: BTreeSet<_> = split.labeled.iter().map(|r| &r.id).collect();
        assert!(split.unlabeled.iter().all(|r| !labeled.contains(&r.id)));

        for r in &ds.annotations.records {
            let f = ds.feature(&r.id).values();
            let unit = r.duration / cfg.t_raw as f64;
            for s in &r.segments {
                let j = ((s.start / unit).round()) as usize;
                let col = f.column(j);
                let proto = ds.prototypes.row(s.label - 1);
                assert_eq!(col, proto);
            }
        }
    }

    #[test]
    fn invalid_fraction_is_config_error() {
        for frac in [0.0, -0.5, 1.5] {
            let cfg = SyntheticConfig {
                label_fraction: frac,
                ..SyntheticConfig::default()
            };
            assert!(matches!(synthesize(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let cfg = SyntheticConfig {
            num_videos: 6,
            num_test: 2,
            ..SyntheticConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, 5, a.path()).unwrap();
        generate_synthetic(&cfg, 5, b.path()).unwrap();
        for name in [ANNOTATION_FILE, MANIFEST_FILE, "features/video_00003.bin", "features/video_00003.json"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.annotations.records.len(), 8);
        assert_eq!(loaded.features["video_00001"].len(), cfg.t_raw);
    }
}
