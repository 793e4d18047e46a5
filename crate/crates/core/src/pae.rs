//! Proximity-aware GradCAM: depth → adaptive threshold → depth-informed
//! image → GradCAM over the nearby classes.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{Scalar, UNet};
use crate::types::{DepthMap, DepthSource, HeatKind, HeatMap, Image, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    FileMidas,
    FileDinov2,
    SyntheticGt,
}

/// Serves a depth map per sample: either the sample's own synthetic depth
/// or `<dir>/<sample_id>.depth.png`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProvider {
    pub kind: DepthKind,
    dir: Option<PathBuf>,
}

impl DepthProvider {
    pub fn synthetic() -> Self {
        DepthProvider {
            kind: DepthKind::SyntheticGt,
            dir: None,
        }
    }

    pub fn files(kind: DepthKind, dir: impl Into<PathBuf>) -> Self {
        DepthProvider {
            kind,
            dir: Some(dir.into()),
        }
    }

    fn path_for(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.depth.png")))
    }

    /// Ids in `samples` the provider cannot serve.
    pub fn missing<'a>(&self, samples: impl IntoIterator<Item = &'a Sample>) -> Vec<String> {
        samples
            .into_iter()
            .filter(|s| match self.path_for(s.id()) {
                Some(p) => !p.is_file(),
                None => s.depth.is_none(),
            })
            .map(|s| s.id().to_string())
            .collect()
    }

    pub fn depth_for(&self, sample: &Sample) -> Result<DepthMap> {
        let depth = match self.path_for(sample.id()) {
            None => sample
                .depth
                .clone()
                .ok_or_else(|| Error::MissingDepth(vec![sample.id().to_string()]))?,
            Some(p) if !p.is_file() => return Err(Error::MissingDepth(vec![sample.id().to_string()])),
            Some(p) => {
                let source = match self.kind {
                    DepthKind::FileDinov2 => DepthSource::FileDinov2,
                    _ => DepthSource::FileMidas,
                };
                io::read_depth_png(&p, source)?
            }
        };
        if depth.shape() != sample.image.shape() {
            return Err(Error::shape(
                format!("{:?}", sample.image.shape()),
                format!("{:?}", depth.shape()),
            ));
        }
        Ok(depth)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMask {
    pub soft: HeatMap,
    /// The realised per-image threshold `t`.
    pub tau_used: f64,
    /// Set when the depth map was constant.
    pub degenerate: bool,
}

impl ProximityMask {
    pub fn support(&self) -> Array2<bool> {
        self.soft.values.mapv(|v| v > 0.0)
    }
}

/// Nearest-rank quantile: the smallest sample value with at least a
/// fraction `q` of the samples at or below it.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Soft proximity mask with threshold `t = quantile(nearness, 1 - tau)`.
///
/// Above `t` the mask ramps linearly to 1 at nearness 1. With `t = 1` or
/// `tau = 0` the mask is the nearness itself. In `hard` mode pixels at or
/// above `t` get 1 and everything else 0. Constant depth yields all ones and
/// a warning.
pub fn proximity_mask(depth: &DepthMap, tau_quantile: f64, hard: bool) -> Result<ProximityMask> {
    if let Some(v) = depth.violations().first() {
        return Err(Error::Precondition(format!("invalid depth map: {v}")));
    }
    if !(0.0..=1.0).contains(&tau_quantile) {
        return Err(Error::Config(format!("tau_quantile {tau_quantile} outside [0, 1]")));
    }
    let n = &depth.nearness;
    let (lo, hi) = n
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        log::warn!("constant depth map ({lo}); proximity mask is all ones");
        return Ok(ProximityMask {
            soft: HeatMap::new(Array2::ones(n.dim()), HeatKind::Proximity),
            tau_used: lo,
            degenerate: true,
        });
    }
    let flat: Vec<f64> = n.iter().copied().collect();
    let t = nearest_rank_quantile(&flat, 1.0 - tau_quantile);
    let values = if hard {
        n.mapv(|v| if v >= t { 1.0 } else { 0.0 })
    } else if t >= 1.0 || tau_quantile == 0.0 {
        n.mapv(|v| v.clamp(0.0, 1.0))
    } else {
        n.mapv(|v| ((v - t) / (1.0 - t)).clamp(0.0, 1.0))
    };
    Ok(ProximityMask {
        soft: HeatMap::new(values, HeatKind::Proximity),
        tau_used: t,
        degenerate: false,
    })
}

/// Pixelwise, channelwise product of image and mask.
pub fn depth_informed_image(image: &Image, mask: &ProximityMask) -> Result<Image> {
    if image.shape() != mask.soft.shape() {
        return Err(Error::shape(
            format!("{:?}", image.shape()),
            format!("{:?}", mask.soft.shape()),
        ));
    }
    let mut out = image.clone();
    for mut ch in out.pixels.axis_iter_mut(Axis(0)) {
        ch.zip_mut_with(&mask.soft.values, |p, &m| *p = (*p as f64 * m) as f32);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// Sum of the positive gradient entries.
    #[default]
    PositiveGradSum,
    /// Number of spatial positions of the layer.
    SpatialCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    pub map: HeatMap,
    pub z: f64,
    /// Set when the raw map was identically zero.
    pub zero: bool,
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(src: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    let coord = |o: usize, scale: f64, n: usize| {
        let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(n - 1), x - x0 as f64)
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1, fi) = coord(i, sh as f64 / h as f64, sh);
        let (j0, j1, fj) = coord(j, sw as f64 / w as f64, sw);
        let top = src[[i0, j0]] * (1.0 - fj) + src[[i0, j1]] * fj;
        let bot = src[[i1, j0]] * (1.0 - fj) + src[[i1, j1]] * fj;
        top * (1.0 - fi) + bot * fi
    })
}

/// GradCAM of `class` on `layer`, `Z` chosen by `z_mode`; `z_scale`
/// multiplies `Z` and exists for invariance checks.
pub fn gradcam_scaled<T: Scalar>(
    model: &UNet<T>,
    image: &Image,
    class: usize,
    layer: &str,
    z_mode: ZMode,
    z_scale: f64,
) -> Result<GradCam> {
    gradcam_with(model, image, class, layer, z_mode, z_scale, None)
}

/// GradCAM with the class score summed over `roi`-weighted pixels.
pub fn gradcam_roi<T: Scalar>(
    model: &UNet<T>,
    image: &Image,
    class: usize,
    layer: &str,
    z_mode: ZMode,
    roi: &Array2<f64>,
) -> Result<GradCam> {
    gradcam_with(model, image, class, layer, z_mode, 1.0, Some(roi))
}

fn gradcam_with<T: Scalar>(
    model: &UNet<T>,
    image: &Image,
    class: usize,
    layer: &str,
    z_mode: ZMode,
    z_scale: f64,
    roi: Option<&Array2<f64>>,
) -> Result<GradCam> {
    let ctx = model.class_score_with_grads_roi(image, class, layer, roi)?;
    let (k, h, w) = ctx.gradients.dim();
    let z = z_scale
        * match z_mode {
            ZMode::PositiveGradSum => ctx.positive_gradient_sum(),
            ZMode::SpatialCount => (h * w) as f64,
        };
    let (ih, iw) = image.shape();
    if z <= 0.0 {
        return Ok(GradCam {
            map: HeatMap::zeros((ih, iw), HeatKind::Gradcam),
            z,
            zero: true,
        });
    }
    let weights: Vec<f64> = (0..k)
        .map(|kk| ctx.gradients.index_axis(Axis(0), kk).sum() / z)
        .collect();
    let mut raw = Array2::<f64>::zeros((h, w));
    for (kk, wk) in weights.iter().enumerate() {
        raw.scaled_add(*wk, &ctx.activations.index_axis(Axis(0), kk));
    }
    raw.mapv_inplace(|v| v.max(0.0));
    let zero = raw.iter().all(|&v| v == 0.0);
    let up = resize_bilinear(&raw, ih, iw);
    Ok(GradCam {
        map: HeatMap::min_max(up, HeatKind::Gradcam),
        z,
        zero,
    })
}

pub fn gradcam<T: Scalar>(model: &UNet<T>, image: &Image, class: usize, layer: &str, z_mode: ZMode) -> Result<GradCam> {
    gradcam_scaled(model, image, class, layer, z_mode, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaeOptions {
    pub hard_mask: bool,
    pub min_area_fraction: f64,
    pub z_mode: ZMode,
    /// GradCAM layer; the model's default when absent.
    pub layer: Option<String>,
}

impl Default for PaeOptions {
    fn default() -> Self {
        PaeOptions {
            hard_mask: false,
            min_area_fraction: 0.01,
            z_mode: ZMode::PositiveGradSum,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxGradCam {
    pub map: HeatMap,
    pub mask: ProximityMask,
    pub target_classes: Vec<usize>,
    /// No class qualified; `map` is the proximity mask itself.
    pub fallback: bool,
}

/// Classes whose predicted area inside the mask support exceeds
/// `min_area_fraction` of the support.
pub fn target_classes(pred: &Array2<u8>, support: &Array2<bool>, num_classes: usize, min_area_fraction: f64) -> Vec<usize> {
    let mut area = vec![0usize; num_classes];
    let mut total = 0usize;
    for (&c, &s) in pred.iter().zip(support.iter()) {
        if s {
            total += 1;
            if (c as usize) < num_classes {
                area[c as usize] += 1;
            }
        }
    }
    if total == 0 {
        return Vec::new();
    }
    (0..num_classes)
        .filter(|&c| area[c] as f64 > min_area_fraction * total as f64)
        .collect()
}

/// Leakage allowed around the proximity support: one encoder stride.
pub const HALO_PX: usize = 2;

/// Chebyshev dilation of a boolean mask by `r` pixels.
pub fn dilate(m: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] {
                for jj in j.saturating_sub(r)..(j + r + 1).min(w) {
                    rows[[i, jj]] = true;
                }
            }
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if rows[[i, j]] {
                for ii in i.saturating_sub(r)..(i + r + 1).min(h) {
                    out[[ii, j]] = true;
                }
            }
        }
    }
    out
}

pub fn prox_gradcam<T: Scalar>(
    model: &UNet<T>,
    sample: &Sample,
    provider: &DepthProvider,
    tau_quantile: f64,
    opts: &PaeOptions,
) -> Result<ProxGradCam> {
    let depth = provider.depth_for(sample)?;
    let mask = proximity_mask(&depth, tau_quantile, opts.hard_mask)?;
    let informed = depth_informed_image(&sample.image, &mask)?;
    let pred = model.predict_probs(&informed)?.argmax();
    let classes = target_classes(&pred.labels, &mask.support(), model.num_classes(), opts.min_area_fraction);
    if classes.is_empty() {
        return Ok(ProxGradCam {
            map: HeatMap::new(mask.soft.values.clone(), HeatKind::ProxGradcam),
            mask,
            target_classes: classes,
            fallback: true,
        });
    }
    let layer = opts.layer.clone().unwrap_or_else(|| model.config.default_gradcam_layer());
    let mut merged = Array2::<f64>::zeros(sample.image.shape());
    for &c in &classes {
        let cam = gradcam(model, &informed, c, &layer, opts.z_mode)?;
        merged.zip_mut_with(&cam.map.values, |m, &v| *m = m.max(v));
    }
    let allowed = dilate(&mask.support(), HALO_PX);
    merged.zip_mut_with(&allowed, |m, &keep| {
        if !keep {
            *m = 0.0;
        }
    });
    Ok(ProxGradCam {
        map: HeatMap::min_max(merged, HeatKind::ProxGradcam),
        mask,
        target_classes: classes,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImageSource;
    use ndarray::Array3;

    fn ramp(h: usize, w: usize) -> DepthMap {
        DepthMap {
            nearness: Array2::from_shape_fn((h, w), |(i, _)| i as f64 / (h - 1) as f64),
            provider: DepthSource::Synthetic,
        }
    }

    #[test]
    fn median_threshold_on_row_ramp() {
        let m = proximity_mask(&ramp(16, 16), 0.5, false).unwrap();
        for i in 0..8 {
            assert!(m.soft.values.row(i).iter().all(|&v| v == 0.0), "row {i}");
        }
        assert!(m.soft.values.row(15).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_depth_gives_all_ones() {
        let d = DepthMap {
            nearness: Array2::from_elem((16, 16), 0.7),
            provider: DepthSource::Synthetic,
        };
        let m = proximity_mask(&d, 0.5, false).unwrap();
        assert!(m.degenerate);
        assert!(m.soft.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_tau_is_identity_ramp() {
        let d = ramp(16, 16);
        let m = proximity_mask(&d, 0.0, false).unwrap();
        assert_eq!(m.soft.values, d.nearness);
    }

    #[test]
    fn hard_mode_is_binary() {
        let m = proximity_mask(&ramp(16, 16), 0.25, true).unwrap();
        assert!(m.soft.values.iter().all(|&v| v == 0.0 || v == 1.0));
        // t is row 11 (nearest rank 192 of 256); rows at the threshold are kept.
        assert_eq!(m.tau_used, 11.0 / 15.0);
        assert_eq!(m.soft.values.iter().filter(|&&v| v == 1.0).count(), 5 * 16);
    }

    #[test]
    fn masking_multiplies_pixels() {
        let img = Image::new("x", ImageSource::Synthetic, Array3::from_elem((3, 16, 16), 0.8)).unwrap();
        let checker = Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) % 2) as f64);
        let mask = ProximityMask {
            soft: HeatMap::new(checker.clone(), HeatKind::Proximity),
            tau_used: 0.0,
            degenerate: false,
        };
        let out = depth_informed_image(&img, &mask).unwrap();
        for ((_, i, j), &v) in out.pixels.indexed_iter() {
            assert_eq!(v, if checker[[i, j]] == 1.0 { 0.8 } else { 0.0 });
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let a = Array2::from_elem((4, 8), 0.3);
        assert!(resize_bilinear(&a, 16, 32).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let b = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(resize_bilinear(&b, 4, 4), b);
    }

    #[test]
    fn target_classes_use_support_area() {
        let pred = Array2::from_shape_fn((10, 10), |(i, _)| if i < 5 { 0u8 } else { 2 });
        let support = Array2::from_shape_fn((10, 10), |(i, _)| i >= 4);
        assert_eq!(target_classes(&pred, &support, 3, 0.01), vec![0, 2]);
        assert_eq!(target_classes(&pred, &support, 3, 0.2), vec![2]);
        assert!(target_classes(&pred, &Array2::from_elem((10, 10), false), 3, 0.01).is_empty());
    }
}
