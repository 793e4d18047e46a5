//! Explainable Error Mask: weighted fusion of the proximity GradCAM and the
//! entropy map, and extraction of ranked candidate regions for the oracle.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{HeatKind, HeatMap};

#[derive(Debug, Clone, PartialEq)]
pub struct EEMask {
    pub map: HeatMap,
    pub alpha: f64,
    pub beta: f64,
    /// Kinds of the two fused maps, proximity term first.
    pub provenance: (HeatKind, HeatKind),
}

/// `clamp(alpha * prox + beta * ent, 0, 1)` per pixel.
pub fn fuse(prox: &HeatMap, ent: &HeatMap, alpha: f64, beta: f64) -> Result<EEMask> {
    if prox.shape() != ent.shape() {
        return Err(Error::shape(format!("{:?}", prox.shape()), format!("{:?}", ent.shape())));
    }
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
        return Err(Error::Config(format!("fusion weights alpha={alpha} beta={beta}")));
    }
    let mut values = prox.values.clone();
    values.zip_mut_with(&ent.values, |p, &e| *p = (alpha * *p + beta * e).clamp(0.0, 1.0));
    Ok(EEMask {
        map: HeatMap::new(values, HeatKind::Eem),
        alpha,
        beta,
        provenance: (prox.kind, ent.kind),
    })
}

/// One horizontal run of region pixels: `[row, first_col, length]`.
pub type Run = [usize; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub sample_id: String,
    pub rank: usize,
    /// Mean EEM over the region.
    pub score: f64,
    /// `[i, j]` of the in-region pixel nearest the EEM-weighted centroid.
    pub anchor: [usize; 2],
    pub pixels: usize,
    pub rle: Vec<Run>,
}

impl CandidatePrompt {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rle.iter().any(|&[r, c, n]| r == i && (c..c + n).contains(&j))
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rle.iter().flat_map(|&[r, c, n]| (c..c + n).map(move |j| (r, j)))
    }

    pub fn to_mask(&self, shape: (usize, usize)) -> Array2<bool> {
        let mut m = Array2::from_elem(shape, false);
        for ij in self.iter_pixels() {
            m[ij] = true;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    pub percentile: f64,
    pub max_regions: usize,
    pub min_region_px: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            percentile: 80.0,
            max_regions: 5,
            min_region_px: 16,
        }
    }
}

/// 4-connected components of `mask` in scan order of their first pixel.
pub fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || seen[[i, j]] {
                continue;
            }
            let mut comp = Vec::new();
            seen[[i, j]] = true;
            queue.push_back((i, j));
            while let Some((a, b)) = queue.pop_front() {
                comp.push((a, b));
                let nbrs = [
                    (a.wrapping_sub(1), b),
                    (a + 1, b),
                    (a, b.wrapping_sub(1)),
                    (a, b + 1),
                ];
                for (x, y) in nbrs {
                    if x < h && y < w && mask[[x, y]] && !seen[[x, y]] {
                        seen[[x, y]] = true;
                        queue.push_back((x, y));
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

fn encode_runs(sorted: &[(usize, usize)]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &(i, j) in sorted {
        match runs.last_mut() {
            Some(r) if r[0] == i && r[1] + r[2] == j => r[2] += 1,
            _ => runs.push([i, j, 1]),
        }
    }
    runs
}

/// Binarisation threshold: nearest-rank `percentile` of the nonzero values.
pub fn binarize_threshold(map: &Array2<f64>, percentile: f64) -> Option<f64> {
    let mut nz: Vec<f64> = map.iter().copied().filter(|&v| v > 0.0).collect();
    if nz.is_empty() {
        return None;
    }
    nz.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0 * nz.len() as f64).ceil() as usize).clamp(1, nz.len());
    Some(nz[rank - 1])
}

/// Thresholds the EEM, takes 4-connected components, drops the small ones
/// and returns the `max_regions` best by mean EEM.
pub fn extract_candidates(sample_id: &str, eem: &EEMask, params: &ExtractParams) -> Result<Vec<CandidatePrompt>> {
    if !(params.percentile > 0.0 && params.percentile < 100.0) {
        return Err(Error::Config(format!("percentile {} outside (0, 100)", params.percentile)));
    }
    let values = &eem.map.values;
    let Some(t) = binarize_threshold(values, params.percentile) else {
        return Ok(Vec::new());
    };
    let mask = values.mapv(|v| v > 0.0 && v >= t);
    let mut regions: Vec<(f64, Vec<(usize, usize)>)> = components(&mask)
        .into_iter()
        .filter(|c| c.len() >= params.min_region_px)
        .map(|c| {
            let mean = c.iter().map(|&ij| values[ij]).sum::<f64>() / c.len() as f64;
            (mean, c)
        })
        .collect();
    // Stable: equal scores keep scan order.
    regions.sort_by(|a, b| b.0.total_cmp(&a.0));
    regions.truncate(params.max_regions);
    Ok(regions
        .into_iter()
        .enumerate()
        .map(|(k, (score, pixels))| {
            let mass: f64 = pixels.iter().map(|&ij| values[ij]).sum();
            let (ci, cj) = pixels.iter().fold((0.0, 0.0), |(a, b), &(i, j)| {
                let v = values[[i, j]] / mass;
                (a + v * i as f64, b + v * j as f64)
            });
            let anchor = pixels
                .iter()
                .copied()
                .min_by(|&(ai, aj), &(bi, bj)| {
                    let da = (ai as f64 - ci).powi(2) + (aj as f64 - cj).powi(2);
                    let db = (bi as f64 - ci).powi(2) + (bj as f64 - cj).powi(2);
                    da.total_cmp(&db)
                })
                .expect("regions are non-empty");
            CandidatePrompt {
                sample_id: sample_id.to_string(),
                rank: k + 1,
                score,
                anchor: [anchor.0, anchor.1],
                pixels: pixels.len(),
                rle: encode_runs(&pixels),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EemSidecar {
    pub sample_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub percentile: f64,
    pub regions: Vec<SidecarRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRegion {
    pub rank: usize,
    pub score: f64,
    pub anchor: [usize; 2],
    pub rle: Vec<Run>,
}

impl EemSidecar {
    pub fn new(sample_id: &str, eem: &EEMask, percentile: f64, prompts: &[CandidatePrompt]) -> Self {
        EemSidecar {
            sample_id: sample_id.to_string(),
            alpha: eem.alpha,
            beta: eem.beta,
            percentile,
            regions: prompts
                .iter()
                .map(|p| SidecarRegion {
                    rank: p.rank,
                    score: p.score,
                    anchor: p.anchor,
                    rle: p.rle.clone(),
                })
                .collect(),
        }
    }

    pub fn prompts(&self) -> Vec<CandidatePrompt> {
        self.regions
            .iter()
            .map(|r| CandidatePrompt {
                sample_id: self.sample_id.clone(),
                rank: r.rank,
                score: r.score,
                anchor: r.anchor,
                pixels: r.rle.iter().map(|run| run[2]).sum(),
                rle: r.rle.clone(),
            })
            .collect()
    }
}

/// Grayscale EEM PNG plus its JSON sidecar.
pub fn export_eem(png: &Path, json: &Path, sidecar: &EemSidecar, eem: &EEMask) -> Result<()> {
    io::write_heatmap_png(&eem.map, png)?;
    io::write_atomic(json, &serde_json::to_vec_pretty(sidecar)?)
}
