use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scalar, UNet};
use crate::par::Execution;
use crate::types::{LabelMask, Sample, IGNORE, SCHEMA_VERSION};

/// Pixel confusion counts, `counts[gt * C + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
            if g == IGNORE || p == IGNORE {
                continue;
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU for every class with at least one ground-truth pixel.
    pub fn per_class_iou(&self) -> BTreeMap<u8, f64> {
        let c = self.num_classes;
        let mut out = BTreeMap::new();
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let gt_total: u64 = (0..c).map(|p| self.counts[k * c + p]).sum();
            if gt_total == 0 {
                continue;
            }
            let pred_total: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
            let union = gt_total + pred_total - tp;
            out.insert(k as u8, tp as f64 / union as f64);
        }
        out
    }
}

pub fn mean_iou(per_class: &BTreeMap<u8, f64>) -> f64 {
    if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl DiceSummary {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return DiceSummary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        DiceSummary {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            min: v[0],
            max: v[n - 1],
            median,
        }
    }
}

/// One evaluation point of the loop. Wall time is kept out of this
/// document (see the run directory's `timing.json`) so that identical runs
/// write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub cycle: usize,
    pub per_class_iou: BTreeMap<u8, f64>,
    pub miou: f64,
    pub dice_distribution: DiceSummary,
    pub samples_labeled: usize,
    pub samples_accepted: usize,
    pub samples_queried: usize,
}

impl MetricsReport {
    pub fn from_confusion(conf: &Confusion) -> Self {
        let per_class_iou = conf.per_class_iou();
        MetricsReport {
            schema: SCHEMA_VERSION.into(),
            cycle: 0,
            miou: mean_iou(&per_class_iou),
            per_class_iou,
            dice_distribution: DiceSummary::default(),
            samples_labeled: 0,
            samples_accepted: 0,
            samples_queried: 0,
        }
    }
}

/// Confusion over the whole evaluation set, predictions computed through
/// `exec` and merged in sample order.
pub fn evaluate<T: Scalar>(model: &UNet<T>, eval: &[Sample], exec: Execution) -> Result<Confusion> {
    if eval.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let parts = exec.try_map(eval, |s| -> Result<Confusion> {
        let gt = s
            .gt
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(s.id().to_string()))?;
        let mut c = Confusion::new(model.num_classes());
        c.add(&model.predict_mask(&s.image)?, gt)?;
        Ok(c)
    })?;
    let mut total = Confusion::new(model.num_classes());
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

pub fn compute_metrics<T: Scalar>(model: &UNet<T>, eval: &[Sample], exec: Execution) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(&evaluate(model, eval, exec)?))
}
