//! DICE agreement between prediction and re-annotation, and the threshold
//! gate that admits annotated samples into the labeled pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::AnnotationRecord;
use crate::types::{LabelMask, PoolTag, SamplePool, IGNORE};

/// Macro DICE over the classes present in either mask. Ignore pixels belong
/// to no class set of the mask that carries them. Two masks with no class
/// pixels at all agree trivially (1.0).
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    if a.num_classes != b.num_classes {
        return Err(Error::Precondition(format!(
            "class counts differ: {} vs {}",
            a.num_classes, b.num_classes
        )));
    }
    let c = a.num_classes as usize;
    let mut inter = vec![0u64; c];
    let mut size_a = vec![0u64; c];
    let mut size_b = vec![0u64; c];
    for (&x, &y) in a.labels.iter().zip(b.labels.iter()) {
        if x != IGNORE {
            size_a[x as usize] += 1;
            if x == y {
                inter[x as usize] += 1;
            }
        }
        if y != IGNORE {
            size_b[y as usize] += 1;
        }
    }
    let scores: Vec<f64> = (0..c)
        .filter(|&k| size_a[k] + size_b[k] > 0)
        .map(|k| 2.0 * inter[k] as f64 / (size_a[k] + size_b[k]) as f64)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub sample_id: String,
    pub dice: f64,
    pub theta: f64,
    pub accepted: bool,
    pub cycle: usize,
}

pub struct SelectionInput<'a> {
    pub prediction: &'a LabelMask,
    pub record: &'a AnnotationRecord,
}

/// Gates each annotated candidate on `dice(prediction, corrected) >= theta`
/// (`<` when `inverted`). Accepted samples move to the labeled pool, the
/// rest and any candidate without an input return to the unlabeled pool.
/// Nothing is mutated if any input is not a candidate.
pub fn select(
    inputs: &[SelectionInput<'_>],
    theta: f64,
    inverted: bool,
    pool: &mut SamplePool,
    cycle: usize,
) -> Result<Vec<SelectionDecision>> {
    let mut seen = std::collections::BTreeSet::new();
    for inp in inputs {
        let id = &inp.record.sample_id;
        if !pool.candidate.contains(id) || !seen.insert(id.clone()) {
            return Err(Error::NotCandidate(id.clone()));
        }
    }
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let d = dice(inp.prediction, &inp.record.corrected)?;
        let accepted = if inverted { d < theta } else { d >= theta };
        out.push(SelectionDecision {
            sample_id: inp.record.sample_id.clone(),
            dice: d,
            theta,
            accepted,
            cycle,
        });
    }
    for d in &out {
        let to = if d.accepted { PoolTag::Labeled } else { PoolTag::Unlabeled };
        pool.transfer(&d.sample_id, PoolTag::Candidate, to)?;
    }
    let leftovers: Vec<String> = pool.candidate.iter().cloned().collect();
    for id in leftovers {
        pool.transfer(&id, PoolTag::Candidate, PoolTag::Unlabeled)?;
    }
    Ok(out)
}
