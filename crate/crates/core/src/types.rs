//! Shared domain types: images, masks, probability and heat maps, samples,
//! pools and the loop configuration.
//!
//! Data types expose their fields; `violations()` methods report invariant
//! breaches instead of failing, and [`validate_sample`] collects them for a
//! whole sample.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from loss, entropy aggregation, DICE and IoU.
pub const IGNORE: u8 = 255;

/// Schema tag carried by every persisted JSON document.
pub const SCHEMA_VERSION: &str = "segxal/1";

pub const MIN_SIDE: usize = 16;

const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Synthetic,
    Cityscapes,
    External,
}

/// RGB image with values in `[0, 1]`, stored channel-first as `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub source: ImageSource,
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn new(id: impl Into<String>, source: ImageSource, pixels: Array3<f32>) -> Result<Self> {
        let img = Image {
            id: id.into(),
            source,
            pixels,
        };
        match img.violations().into_iter().next() {
            Some(v) => Err(Error::Precondition(v)),
            None => Ok(img),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (c, h, w) = self.pixels.dim();
        if c != 3 {
            out.push(format!("image {}: expected 3 channels, found {c}", self.id));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            out.push(format!(
                "image {}: {h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                self.id
            ));
        }
        if let Some(((ch, i, j), v)) = self
            .pixels
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            out.push(format!(
                "image {}: pixel ({i},{j}) channel {ch} = {v} outside [0,1]",
                self.id
            ));
        }
        out
    }
}

/// Per-pixel class ids in `[0, C)` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub labels: Array2<u8>,
    pub num_classes: u8,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>, num_classes: u8) -> Result<Self> {
        let m = LabelMask {
            labels,
            num_classes,
        };
        match m.violations().into_iter().next() {
            Some(v) => Err(Error::Precondition(v)),
            None => Ok(m),
        }
    }

    pub fn filled(shape: (usize, usize), value: u8, num_classes: u8) -> Self {
        LabelMask {
            labels: Array2::from_elem(shape, value),
            num_classes,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn violations(&self) -> Vec<String> {
        let c = self.num_classes;
        self.labels
            .indexed_iter()
            .find(|(_, &v)| v != IGNORE && v >= c)
            .map(|((i, j), v)| vec![format!("label ({i},{j}) = {v} not below C = {c}")])
            .unwrap_or_default()
    }

    /// Sorted distinct non-ignore class ids.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in self.labels.iter() {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Per-pixel class probabilities, `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub probs: Array3<f64>,
}

impl ProbMap {
    pub fn num_classes(&self) -> usize {
        self.probs.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.probs.dim();
        (h, w)
    }

    /// Softmax over the class axis of raw logits `(C, H, W)`.
    pub fn from_logits(logits: &Array3<f64>) -> Self {
        let mut probs = logits.clone();
        for mut lane in probs.lanes_mut(Axis(0)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        ProbMap { probs }
    }

    /// Arg-max class per pixel; ties resolve to the lowest class id.
    pub fn argmax(&self) -> LabelMask {
        let (c, h, w) = self.probs.dim();
        let labels = Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0;
            for k in 1..c {
                if self.probs[[k, i, j]] > self.probs[[best, i, j]] {
                    best = k;
                }
            }
            best as u8
        });
        LabelMask {
            labels,
            num_classes: c as u8,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let (_, h, w) = self.probs.dim();
        for i in 0..h {
            for j in 0..w {
                let col = self.probs.slice(ndarray::s![.., i, j]);
                if let Some(v) = col.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
                    return vec![format!("probability at pixel ({i},{j}) = {v} outside [0,1]")];
                }
                let s: f64 = col.sum();
                if (s - 1.0).abs() >= PROB_SUM_TOL {
                    return vec![format!("probabilities at pixel ({i},{j}) sum to {s}")];
                }
            }
        }
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatKind {
    Entropy,
    Gradcam,
    Proximity,
    ProxGradcam,
    Eem,
}

/// Scalar field over pixels with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub values: Array2<f64>,
    pub kind: HeatKind,
}

impl HeatMap {
    /// Wraps values already in `[0, 1]`.
    pub fn new(values: Array2<f64>, kind: HeatKind) -> Self {
        HeatMap { values, kind }
    }

    pub fn zeros(shape: (usize, usize), kind: HeatKind) -> Self {
        HeatMap {
            values: Array2::zeros(shape),
            kind,
        }
    }

    /// Min-max normalizes `raw` into `[0, 1]`. A constant field maps to zeros.
    pub fn min_max(raw: Array2<f64>, kind: HeatKind) -> Self {
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let values = if hi > lo {
            raw.mapv(|v| (v - lo) / (hi - lo))
        } else {
            Array2::zeros(raw.dim())
        };
        HeatMap { values, kind }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(v))
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn violations(&self) -> Vec<String> {
        self.values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
            .map(|((i, j), v)| vec![format!("{:?} heatmap ({i},{j}) = {v} outside [0,1]", self.kind)])
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    FileMidas,
    FileDinov2,
    Synthetic,
}

/// Relative nearness in `[0, 1]`, larger = nearer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub nearness: Array2<f64>,
    pub provider: DepthSource,
}

impl DepthMap {
    pub fn shape(&self) -> (usize, usize) {
        self.nearness.dim()
    }

    pub fn violations(&self) -> Vec<String> {
        self.nearness
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
            .map(|((i, j), v)| vec![format!("depth ({i},{j}) = {v} outside [0,1]")])
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolTag {
    Labeled,
    Unlabeled,
    Candidate,
}

impl fmt::Display for PoolTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolTag::Labeled => "labeled",
            PoolTag::Unlabeled => "unlabeled",
            PoolTag::Candidate => "candidate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gt: Option<LabelMask>,
    pub depth: Option<DepthMap>,
    /// Latest model prediction, when one has been attached.
    pub probs: Option<ProbMap>,
    pub pool_tag: PoolTag,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.image.id
    }
}

/// Every invariant breach of the sample and its attached arrays.
pub fn validate_sample(sample: &Sample) -> Vec<String> {
    let mut out = sample.image.violations();
    let shape = sample.image.shape();
    if let Some(gt) = &sample.gt {
        if gt.shape() != shape {
            out.push(format!("gt shape {:?} differs from image {:?}", gt.shape(), shape));
        }
        out.extend(gt.violations());
    }
    if let Some(d) = &sample.depth {
        if d.shape() != shape {
            out.push(format!("depth shape {:?} differs from image {:?}", d.shape(), shape));
        }
        out.extend(d.violations());
    }
    if let Some(p) = &sample.probs {
        if p.shape() != shape {
            out.push(format!("probs shape {:?} differs from image {:?}", p.shape(), shape));
        }
        out.extend(p.violations());
    }
    if sample.pool_tag == PoolTag::Labeled && sample.gt.is_none() {
        out.push("labeled-without-gt".to_string());
    }
    out
}

/// Membership of sample ids in the labeled, unlabeled and candidate pools.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePool {
    pub labeled: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
    pub candidate: BTreeSet<String>,
}

impl SamplePool {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.candidate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag_of(&self, id: &str) -> Option<PoolTag> {
        if self.labeled.contains(id) {
            Some(PoolTag::Labeled)
        } else if self.unlabeled.contains(id) {
            Some(PoolTag::Unlabeled)
        } else if self.candidate.contains(id) {
            Some(PoolTag::Candidate)
        } else {
            None
        }
    }

    fn set_mut(&mut self, tag: PoolTag) -> &mut BTreeSet<String> {
        match tag {
            PoolTag::Labeled => &mut self.labeled,
            PoolTag::Unlabeled => &mut self.unlabeled,
            PoolTag::Candidate => &mut self.candidate,
        }
    }

    /// Moves `id` from `from` to `to`.
    pub fn transfer(&mut self, id: &str, from: PoolTag, to: PoolTag) -> Result<()> {
        if !self.set_mut(from).remove(id) {
            return Err(Error::Precondition(format!("sample `{id}` is not {from}")));
        }
        self.set_mut(to).insert(id.to_string());
        Ok(())
    }

    /// Checks pairwise disjointness of the three pools.
    pub fn audit(&self) -> Result<()> {
        let overlap = self
            .labeled
            .intersection(&self.unlabeled)
            .chain(self.labeled.intersection(&self.candidate))
            .chain(self.unlabeled.intersection(&self.candidate))
            .next();
        match overlap {
            Some(id) => Err(Error::Precondition(format!("sample `{id}` is in two pools"))),
            None => Ok(()),
        }
    }

    pub fn all_ids(&self) -> BTreeSet<String> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.candidate)
            .cloned()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PoolDocument {
    schema: String,
    #[serde(flatten)]
    pool: SamplePool,
}

pub fn serialize_pool(pool: &SamplePool) -> Result<Vec<u8>> {
    pool.audit()?;
    let doc = PoolDocument {
        schema: SCHEMA_VERSION.to_string(),
        pool: pool.clone(),
    };
    Ok(serde_json::to_vec_pretty(&doc)?)
}

pub fn deserialize_pool(bytes: &[u8]) -> Result<SamplePool> {
    let doc: PoolDocument = serde_json::from_slice(bytes).map_err(|e| corrupt(bytes, &e))?;
    if doc.schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: SCHEMA_VERSION.into(),
            found: doc.schema,
        });
    }
    doc.pool.audit().map_err(|e| Error::CorruptInput {
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok(doc.pool)
}

/// Maps a serde_json error position (1-based line/column) to a byte offset.
pub(crate) fn corrupt(bytes: &[u8], e: &serde_json::Error) -> Error {
    let (line, col) = (e.line(), e.column());
    let offset = if line == 0 {
        0
    } else {
        let line_start: usize = bytes
            .split(|&b| b == b'\n')
            .take(line - 1)
            .map(|l| l.len() + 1)
            .sum();
        (line_start + col.saturating_sub(1)).min(bytes.len())
    };
    Error::CorruptInput {
        offset,
        reason: e.to_string(),
    }
}

/// Loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ALConfig {
    pub initial_label_fraction: f64,
    pub query_fraction_per_cycle: f64,
    /// The per-cycle random subset D^S holds this many times the query size;
    /// the strategy picks the queried samples from it.
    pub candidate_subset_factor: usize,
    pub num_cycles: usize,
    /// Maximum number of samples sent to the oracle over the whole run.
    /// `None` means the whole training set.
    pub budget_n: Option<usize>,
    pub fusion_alpha: f64,
    pub fusion_beta: f64,
    pub dice_threshold_theta: f64,
    pub depth_quantile_tau: f64,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            initial_label_fraction: 0.10,
            query_fraction_per_cycle: 0.05,
            candidate_subset_factor: 2,
            num_cycles: 5,
            budget_n: None,
            fusion_alpha: 0.5,
            fusion_beta: 0.5,
            dice_threshold_theta: 0.85,
            depth_quantile_tau: 0.5,
            seed: 1,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")))
            }
        };
        frac("initial_label_fraction", self.initial_label_fraction)?;
        frac("query_fraction_per_cycle", self.query_fraction_per_cycle)?;
        frac("depth_quantile_tau", self.depth_quantile_tau)?;
        if !(0.0..=1.0).contains(&self.dice_threshold_theta) {
            return Err(Error::Config(format!(
                "dice_threshold_theta = {} must lie in [0, 1]",
                self.dice_threshold_theta
            )));
        }
        if self.fusion_alpha < 0.0 || self.fusion_beta < 0.0 {
            return Err(Error::Config("fusion weights must be non-negative".into()));
        }
        if self.fusion_alpha + self.fusion_beta <= 0.0 {
            return Err(Error::Config("fusion_alpha + fusion_beta must be positive".into()));
        }
        if self.num_cycles < 1 {
            return Err(Error::Config("num_cycles must be at least 1".into()));
        }
        if self.candidate_subset_factor < 1 {
            return Err(Error::Config("candidate_subset_factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wire form of a [`LabelMask`]: shape, class count and row-major
/// `[value, count]` runs.
pub mod label_mask_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wire {
        height: usize,
        width: usize,
        num_classes: u8,
        runs: Vec<[u32; 2]>,
    }

    pub fn serialize<S: Serializer>(m: &LabelMask, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (height, width) = m.shape();
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &v in m.labels.iter() {
            match runs.last_mut() {
                Some(r) if r[0] == v as u32 => r[1] += 1,
                _ => runs.push([v as u32, 1]),
            }
        }
        Wire {
            height,
            width,
            num_classes: m.num_classes,
            runs,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<LabelMask, D::Error> {
        use serde::de::Error as _;
        let w = Wire::deserialize(d)?;
        let mut flat = Vec::with_capacity(w.height * w.width);
        for [v, n] in w.runs {
            let v = u8::try_from(v).map_err(|_| D::Error::custom(format!("label {v} exceeds 255")))?;
            flat.extend(std::iter::repeat_n(v, n as usize));
        }
        let labels = Array2::from_shape_vec((w.height, w.width), flat)
            .map_err(|_| D::Error::custom("run lengths do not cover the mask"))?;
        LabelMask::new(labels, w.num_classes).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str) -> Image {
        Image::new(id, ImageSource::Synthetic, Array3::from_elem((3, 16, 16), 0.5)).unwrap()
    }

    fn sample(tag: PoolTag, gt: bool) -> Sample {
        Sample {
            image: image("s0"),
            gt: gt.then(|| LabelMask::filled((16, 16), 1, 5)),
            depth: None,
            probs: None,
            pool_tag: tag,
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&sample(PoolTag::Labeled, true)).is_empty());
    }

    #[test]
    fn bad_probability_column_is_reported_with_pixel() {
        let mut s = sample(PoolTag::Unlabeled, false);
        let mut probs = Array3::from_elem((2, 16, 16), 0.5);
        probs[[0, 3, 4]] = 0.7;
        s.probs = Some(ProbMap { probs });
        let v = validate_sample(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("(3,4)"), "{v:?}");
        assert!(v[0].contains("1.2"), "{v:?}");
    }

    #[test]
    fn labeled_without_gt_is_a_violation() {
        assert_eq!(
            validate_sample(&sample(PoolTag::Labeled, false)),
            vec!["labeled-without-gt".to_string()]
        );
    }

    #[test]
    fn image_too_small_rejected() {
        assert!(Image::new("x", ImageSource::External, Array3::zeros((3, 8, 32))).is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut l = Array2::zeros((16, 16));
        l[[0, 0]] = 5;
        assert!(LabelMask::new(l.clone(), 5).is_err());
        l[[0, 0]] = IGNORE;
        assert!(LabelMask::new(l, 5).is_ok());
    }

    #[test]
    fn empty_pool_round_trips() {
        let p = SamplePool::default();
        assert_eq!(deserialize_pool(&serialize_pool(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn pool_round_trip_preserves_membership() {
        let mut p = SamplePool::default();
        for i in 0..100 {
            let id = format!("s{i:03}");
            if i < 10 {
                p.labeled.insert(id);
            } else {
                p.unlabeled.insert(id);
            }
        }
        let back = deserialize_pool(&serialize_pool(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.labeled.len(), 10);
        assert_eq!(back.unlabeled.len(), 90);
    }

    #[test]
    fn truncated_pool_is_corrupt_input() {
        let mut p = SamplePool::default();
        p.labeled.insert("a".into());
        let bytes = serialize_pool(&p).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match deserialize_pool(cut) {
            Err(Error::CorruptInput { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected corrupt input, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_pools_fail_audit() {
        let mut p = SamplePool::default();
        p.labeled.insert("a".into());
        p.candidate.insert("a".into());
        assert!(p.audit().is_err());
        assert!(serialize_pool(&p).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Array3::from_shape_fn((4, 3, 3), |(c, i, j)| (c * 7 + i * 3 + j) as f64 * 0.37);
        let p = ProbMap::from_logits(&logits);
        assert!(p.violations().is_empty());
    }

    #[test]
    fn config_defaults_valid_and_checked() {
        ALConfig::default().validate().unwrap();
        let bad = ALConfig {
            fusion_alpha: 0.0,
            fusion_beta: 0.0,
            ..ALConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ALConfig {
            num_cycles: 0,
            ..ALConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
