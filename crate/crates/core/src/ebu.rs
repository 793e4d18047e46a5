//! Entropy-based uncertainty.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{HeatKind, HeatMap, LabelMask, ProbMap, IGNORE};

/// Summary of raw per-pixel entropy in bits over non-ignore pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub num_classes: usize,
    #[serde(skip)]
    sorted: Vec<f64>,
}

impl EntropyStats {
    /// Fraction of pixels whose normalised entropy `H / log2(C)` exceeds `q`.
    pub fn fraction_above(&self, q: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let cut = q * (self.num_classes as f64).log2();
        let below = self.sorted.partition_point(|&h| h <= cut);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }
}

/// Shannon entropy in bits of one distribution, with `0 log 0 = 0`.
///
/// Terms are summed in ascending order of probability, so the result is
/// bit-identical under any permutation of the classes.
pub fn pixel_entropy(p: &mut [f64]) -> f64 {
    p.sort_by(f64::total_cmp);
    let mut h = 0.0;
    for &v in p.iter() {
        if v > 0.0 {
            h -= v * v.log2();
        }
    }
    h.max(0.0)
}

/// Raw entropy in bits per pixel.
pub fn raw_entropy(probs: &ProbMap) -> Array2<f64> {
    let (c, h, w) = probs.probs.dim();
    let mut buf = vec![0.0; c];
    Array2::from_shape_fn((h, w), |(i, j)| {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = probs.probs[[k, i, j]];
        }
        pixel_entropy(&mut buf)
    })
}

/// Entropy heat map (`H / log2 C`, clamped to `[0, 1]`) and raw-bit
/// statistics. Pixels labelled [`IGNORE`] in `ignore` are zeroed and left
/// out of the statistics.
pub fn entropy_map(probs: &ProbMap, ignore: Option<&LabelMask>) -> Result<(HeatMap, EntropyStats)> {
    let bad = probs.violations();
    if let Some(first) = bad.first() {
        return Err(Error::Precondition(format!("invalid probability map: {first}")));
    }
    let c = probs.num_classes();
    if let Some(m) = ignore {
        if m.shape() != probs.shape() {
            return Err(Error::shape(format!("{:?}", probs.shape()), format!("{:?}", m.shape())));
        }
    }
    let raw = raw_entropy(probs);
    let norm = if c > 1 { (c as f64).log2() } else { 1.0 };
    let mut values = raw.mapv(|h| (h / norm).clamp(0.0, 1.0));
    let mut kept = Vec::with_capacity(raw.len());
    for ((ij, &h), v) in raw.indexed_iter().zip(values.iter_mut()) {
        if ignore.is_some_and(|m| m.labels[ij] == IGNORE) {
            *v = 0.0;
        } else {
            kept.push(h);
        }
    }
    kept.sort_by(f64::total_cmp);
    let stats = EntropyStats {
        mean: if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 },
        max: kept.last().copied().unwrap_or(0.0),
        min: kept.first().copied().unwrap_or(0.0),
        num_classes: c,
        sorted: kept,
    };
    Ok((HeatMap::new(values, HeatKind::Entropy), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn single_pixel(p: &[f64]) -> ProbMap {
        ProbMap {
            probs: Array3::from_shape_vec((p.len(), 1, 1), p.to_vec()).unwrap(),
        }
    }

    #[test]
    fn uniform_four_is_two_bits() {
        let (map, stats) = entropy_map(&single_pixel(&[0.25; 4]), None).unwrap();
        assert_eq!(stats.max, 2.0);
        assert_eq!(map.values[[0, 0]], 1.0);
    }

    #[test]
    fn one_hot_is_zero() {
        let (_, stats) = entropy_map(&single_pixel(&[0.0, 1.0, 0.0]), None).unwrap();
        assert_eq!(stats.max, 0.0);
    }

    #[test]
    fn two_point_uniform_is_one_bit() {
        let (map, stats) = entropy_map(&single_pixel(&[0.5, 0.5, 0.0, 0.0]), None).unwrap();
        assert_eq!(stats.mean, 1.0);
        assert_eq!(map.values[[0, 0]], 0.5);
    }

    #[test]
    fn ignore_pixels_are_zeroed_and_excluded() {
        let probs = ProbMap {
            probs: Array3::from_elem((2, 1, 2), 0.5),
        };
        let mask = LabelMask::new(Array2::from_shape_vec((1, 2), vec![0, IGNORE]).unwrap(), 2).unwrap();
        let (map, stats) = entropy_map(&probs, Some(&mask)).unwrap();
        assert_eq!(map.values[[0, 1]], 0.0);
        assert_eq!(map.values[[0, 0]], 1.0);
        assert_eq!(stats.fraction_above(0.5), 1.0);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(entropy_map(&single_pixel(&[0.7, 0.5]), None).is_err());
    }
}
