//! PNG encodings for masks, depth, images and heat maps, plus atomic file
//! writes shared by the run directory and the ticket queue.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{DepthMap, DepthSource, HeatMap, Image, ImageSource, LabelMask, IGNORE};

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(Error::from)
}

/// Single-channel 8-bit PNG, value = class id, 255 = ignore.
pub fn write_label_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask.labels[[y as usize, x as usize]]]));
    save(|p| img.save(p), path)
}

pub fn read_label_png(path: &Path, num_classes: u8) -> Result<LabelMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| img.get_pixel(j as u32, i as u32)[0]);
    LabelMask::new(labels, num_classes)
}

/// Single-channel 16-bit PNG; nearness = v / 65535.
pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = depth.shape();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = depth.nearness[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    save(|p| img.save(p), path)
}

pub fn read_depth_png(path: &Path, provider: DepthSource) -> Result<DepthMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let nearness = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    });
    Ok(DepthMap { nearness, provider })
}

pub fn write_rgb_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.shape();
    let px = &image.pixels;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let q = |c: usize| (px[[c, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    save(|p| img.save(p), path)
}

pub fn rgb_from_dynamic(img: &RgbImage, id: &str, source: ImageSource) -> Result<Image> {
    let (w, h) = img.dimensions();
    let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
    });
    Image::new(id, source, pixels)
}

pub fn read_rgb_png(path: &Path, id: &str, source: ImageSource) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    rgb_from_dynamic(&img, id, source)
}

/// 8-bit grayscale, value = round(255 * v).
pub fn write_heatmap_png(map: &HeatMap, path: &Path) -> Result<()> {
    let (h, w) = map.shape();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save(|p| img.save(p), path)
}

/// Anchors of the fixed heat colormap; intermediate values interpolate
/// linearly between neighbouring anchors (black, blue, cyan, yellow, red).
pub const HEAT_ANCHORS: [[u8; 3]; 5] = [
    [0, 0, 0],
    [0, 0, 255],
    [0, 255, 255],
    [255, 255, 0],
    [255, 0, 0],
];

/// Colour of heat value `v` in `[0, 1]` under the fixed colormap.
pub fn heat_color(v: f64) -> [u8; 3] {
    let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    let t = idx as f64 / 255.0 * (HEAT_ANCHORS.len() - 1) as f64;
    let k = (t.floor() as usize).min(HEAT_ANCHORS.len() - 2);
    let f = t - k as f64;
    let (a, b) = (HEAT_ANCHORS[k], HEAT_ANCHORS[k + 1]);
    let mix = |c: usize| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Alpha-blends the coloured heat map over the image:
/// `out = round((1 - alpha) * image + alpha * colour)` per channel in 8 bits.
pub fn overlay(image: &Image, map: &HeatMap, alpha: f64) -> RgbImage {
    let (h, w) = image.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let col = heat_color(map.values[[i, j]]);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let base = (image.pixels[[c, i, j]].clamp(0.0, 1.0) * 255.0).round() as f64;
            out[c] = ((1.0 - alpha) * base + alpha * col[c] as f64).round() as u8;
        }
        Rgb(out)
    })
}

pub fn write_overlay_png(image: &Image, map: &HeatMap, alpha: f64, path: &Path) -> Result<()> {
    let img = overlay(image, map, alpha);
    save(|p| img.save(p), path)
}

/// Display colours for class ids; ignore pixels render black.
pub fn class_color(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 19] = [
        [128, 64, 128],
        [244, 35, 232],
        [70, 70, 70],
        [102, 102, 156],
        [190, 153, 153],
        [153, 153, 153],
        [250, 170, 30],
        [220, 220, 0],
        [107, 142, 35],
        [152, 251, 152],
        [70, 130, 180],
        [220, 20, 60],
        [255, 0, 0],
        [0, 0, 142],
        [0, 0, 70],
        [0, 60, 100],
        [0, 80, 100],
        [0, 0, 230],
        [119, 11, 32],
    ];
    if class == IGNORE {
        [0, 0, 0]
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

pub fn write_segmentation_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(class_color(mask.labels[[y as usize, x as usize]]))
    });
    save(|p| img.save(p), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let nearness = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 16 + j) * 257) as f64 / 65535.0);
        let d = DepthMap {
            nearness,
            provider: DepthSource::Synthetic,
        };
        let p = dir.path().join("a.depth.png");
        write_depth_png(&d, &p).unwrap();
        let back = read_depth_png(&p, DepthSource::FileMidas).unwrap();
        assert_eq!(back.nearness, d.nearness);
    }

    #[test]
    fn label_png_round_trips_with_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = Array2::from_shape_fn((16, 20), |(i, j)| ((i + j) % 5) as u8);
        labels[[2, 3]] = IGNORE;
        let m = LabelMask::new(labels, 5).unwrap();
        let p = dir.path().join("l.png");
        write_label_png(&m, &p).unwrap();
        assert_eq!(read_label_png(&p, 5).unwrap(), m);
    }

    #[test]
    fn colormap_endpoints_match_anchors() {
        assert_eq!(heat_color(0.0), [0, 0, 0]);
        assert_eq!(heat_color(1.0), [255, 0, 0]);
        let mid = heat_color(0.5);
        assert!(mid[0] <= 3 && mid[1] == 255 && mid[2] >= 252, "{mid:?}");
    }
}
