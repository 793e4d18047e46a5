//! Synthetic driving-like scenes, Cityscapes ingestion, dataset export and
//! the initial labeled/unlabeled split.
//!
//! Synthetic scenes: class 0 is background (sky above the horizon and the
//! verge beside the road), class 1 is the road trapezoid, classes `2..C` are
//! upright textured rectangles standing on the ground plane. Nearness grows
//! linearly from the horizon to the bottom row; an object takes the nearness
//! of the ground row it stands on, and objects are painted far to near so
//! depth stays consistent with occlusion. Pixel values are quantised to
//! 8 bits and nearness to 16 bits, so an exported scene reloads exactly.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{
    ALConfig, DepthMap, DepthSource, Image, ImageSource, LabelMask, PoolTag, Sample, SamplePool,
    IGNORE, MIN_SIDE, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub num_objects: usize,
    pub seed: u64,
}

/// Geometry of one painted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: u8,
    /// Ground row the object stands on (its lowest row).
    pub bottom_row: usize,
    pub center_col: usize,
    pub height: usize,
    pub width: usize,
    /// Seeds the object's colour jitter and texture.
    pub texture_seed: u64,
}

/// An object as it landed in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub spec: ObjectSpec,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub nearness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub sample: Sample,
    /// Painting order, far to near.
    pub objects: Vec<PlacedObject>,
}

impl SyntheticScene {
    /// Mean ground-truth nearness over the visible pixels of object `k`.
    pub fn visible_mean_nearness(&self, k: usize) -> Option<f64> {
        let mask = self.visible_mask(k);
        let depth = self.sample.depth.as_ref()?;
        let (sum, n) = mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (ij, _)| (s + depth.nearness[ij], n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Pixels of object `k` not occluded by a later (nearer) object.
    pub fn visible_mask(&self, k: usize) -> Array2<bool> {
        let shape = self.sample.image.shape();
        let mut mask = Array2::from_elem(shape, false);
        let o = &self.objects[k];
        for i in o.top..=o.bottom {
            for j in o.left..=o.right {
                mask[[i, j]] = true;
            }
        }
        for later in &self.objects[k + 1..] {
            for i in later.top..=later.bottom {
                for j in later.left..=later.right {
                    mask[[i, j]] = false;
                }
            }
        }
        mask
    }
}

fn horizon_row(height: usize) -> usize {
    (height * 2) / 5
}

/// Ground nearness of row `r` below the horizon.
fn ground_nearness(r: usize, horizon: usize, height: usize) -> f64 {
    let span = (height - 1 - horizon).max(1) as f64;
    0.05 + 0.95 * (r.saturating_sub(horizon) as f64 / span)
}

fn road_half_width(r: usize, horizon: usize, height: usize, width: usize) -> f64 {
    let t = (r - horizon) as f64 / (height - 1 - horizon).max(1) as f64;
    width as f64 * (0.08 + 0.47 * t)
}

fn class_color(class: u8) -> [f32; 3] {
    match class {
        0 => [0.45, 0.62, 0.88],
        1 => [0.38, 0.38, 0.40],
        2 => [0.78, 0.22, 0.20],
        3 => [0.86, 0.74, 0.28],
        4 => [0.52, 0.30, 0.70],
        c => {
            let h = c as f32 * 0.618_034;
            let f = |o: f32| 0.3 + 0.5 * ((h + o).fract() - 0.5).abs() * 2.0;
            [f(0.0), f(0.33), f(0.67)]
        }
    }
}

const VERGE: [f32; 3] = [0.34, 0.52, 0.28];
const NOISE: f32 = 0.05;

fn object_aspect(class: u8) -> f64 {
    const ASPECTS: [f64; 4] = [1.6, 0.5, 0.9, 1.2];
    ASPECTS[(class as usize).saturating_sub(2) % ASPECTS.len()]
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn scene_fits(spec: &SceneSpec) -> bool {
    if spec.width < MIN_SIDE || spec.height < MIN_SIDE || spec.num_classes < 2 {
        return false;
    }
    if spec.num_objects == 0 {
        return true;
    }
    let ground = spec.height - horizon_row(spec.height);
    spec.num_classes >= 3 && spec.num_objects <= (spec.width / 8) * (ground / 4).max(1)
}

/// Deterministic scene with `num_objects` random objects.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if !scene_fits(spec) {
        return Err(Error::SpecTooSmall {
            width: spec.width,
            height: spec.height,
            objects: spec.num_objects,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon = horizon_row(spec.height);
    let weights: Vec<f64> = (2..spec.num_classes).map(|k| 1.0 / (k - 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let objects: Vec<ObjectSpec> = (0..spec.num_objects)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut class = 2u8;
            for (k, w) in weights.iter().enumerate() {
                class = (k + 2) as u8;
                if pick < *w {
                    break;
                }
                pick -= w;
            }
            let bottom_row = rng.random_range(horizon + 3..spec.height);
            let t = (bottom_row - horizon) as f64 / (spec.height - 1 - horizon) as f64;
            let h = ((spec.height as f64 * (0.10 + 0.25 * t)).round() as usize).max(3);
            let w = ((h as f64 * object_aspect(class)).round() as usize).clamp(3, spec.width / 2);
            let center_col = rng.random_range(w / 2..spec.width - w / 2);
            ObjectSpec {
                class,
                bottom_row,
                center_col,
                height: h,
                width: w,
                texture_seed: rng.random(),
            }
        })
        .collect();
    generate_scene_with(spec, &objects)
}

/// Scene with explicitly placed objects; `spec.num_objects` is ignored.
pub fn generate_scene_with(spec: &SceneSpec, objects: &[ObjectSpec]) -> Result<SyntheticScene> {
    let probe = SceneSpec {
        num_objects: 0,
        ..*spec
    };
    if !scene_fits(&probe) {
        return Err(Error::SpecTooSmall {
            width: spec.width,
            height: spec.height,
            objects: objects.len(),
        });
    }
    let (h, w) = (spec.height, spec.width);
    let horizon = horizon_row(h);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let mut px = Array3::<f32>::zeros((3, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut nearness = Array2::<f64>::zeros((h, w));

    for i in 0..h {
        for j in 0..w {
            let (class, base) = if i < horizon {
                let lift = 0.15 * i as f32 / horizon.max(1) as f32;
                let c = class_color(0);
                (0u8, [c[0] + lift, c[1] + lift, c[2]])
            } else {
                nearness[[i, j]] = ground_nearness(i, horizon, h);
                let half = road_half_width(i, horizon, h, w);
                if (j as f64 + 0.5 - w as f64 / 2.0).abs() <= half {
                    (1u8, class_color(1))
                } else {
                    (0u8, VERGE)
                }
            };
            labels[[i, j]] = class;
            for c in 0..3 {
                px[[c, i, j]] = base[c] + rng.random_range(-NOISE..NOISE);
            }
        }
    }

    let mut order: Vec<&ObjectSpec> = objects.iter().collect();
    order.sort_by_key(|o| o.bottom_row);
    let mut placed = Vec::with_capacity(order.len());
    for o in order {
        if o.class as usize >= spec.num_classes || o.class < 2 {
            return Err(Error::Precondition(format!(
                "object class {} outside 2..{}",
                o.class, spec.num_classes
            )));
        }
        if o.bottom_row >= h || o.height == 0 || o.width == 0 || o.height > o.bottom_row + 1 {
            return Err(Error::SpecTooSmall {
                width: w,
                height: h,
                objects: objects.len(),
            });
        }
        let top = o.bottom_row + 1 - o.height;
        let left = o.center_col.saturating_sub(o.width / 2);
        let right = (left + o.width - 1).min(w - 1);
        let near = ground_nearness(o.bottom_row.max(horizon), horizon, h);
        let mut orng = ChaCha8Rng::seed_from_u64(o.texture_seed);
        let base = class_color(o.class);
        let jitter: f32 = orng.random_range(-0.08..0.08);
        // Fixed-size texture tile so identical specs render identically at
        // any position.
        for i in top..=o.bottom_row {
            for j in left..=right {
                labels[[i, j]] = o.class;
                nearness[[i, j]] = near;
                let stripe = if (i - top) % 4 < 2 { 0.04 } else { -0.04 };
                for c in 0..3 {
                    let n: f32 = orng.random_range(-NOISE..NOISE);
                    px[[c, i, j]] = base[c] + jitter + stripe + n;
                }
            }
        }
        placed.push(PlacedObject {
            spec: *o,
            top,
            left,
            bottom: o.bottom_row,
            right,
            nearness: near,
        });
    }

    px.mapv_inplace(quantize);
    nearness.mapv_inplace(|v| (v * 65535.0).round() / 65535.0);
    let id = format!("syn_{:016x}", spec.seed);
    let image = Image::new(id, ImageSource::Synthetic, px)?;
    Ok(SyntheticScene {
        sample: Sample {
            image,
            gt: Some(LabelMask::new(labels, spec.num_classes as u8)?),
            depth: Some(DepthMap {
                nearness,
                provider: DepthSource::Synthetic,
            }),
            probs: None,
            pool_tag: PoolTag::Unlabeled,
        },
        objects: placed,
    })
}

/// Two identical objects of `class`, one standing near the bottom of the
/// frame and one just below the horizon.
pub fn near_far_pair_scene(spec: &SceneSpec, class: u8) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let horizon = horizon_row(h);
    let oh = (h / 5).max(4);
    let ow = ((oh as f64 * object_aspect(class)).round() as usize).clamp(3, w / 3);
    let texture_seed: u64 = rng.random();
    let near_row = h - 1 - rng.random_range(0..(h / 16).max(1));
    let far_row = (horizon + oh).min(near_row - oh - 1) + rng.random_range(0..(h / 16).max(1));
    let near_col = rng.random_range(w / 8 + ow / 2..w / 2 - ow / 2);
    let far_col = rng.random_range(w / 2 + ow / 2..w - w / 8 - ow / 2);
    let (near_col, far_col) = if rng.random::<bool>() {
        (near_col, far_col)
    } else {
        (w - near_col, w - far_col)
    };
    let obj = |bottom_row, center_col| ObjectSpec {
        class,
        bottom_row,
        center_col,
        height: oh,
        width: ow,
        texture_seed,
    };
    generate_scene_with(spec, &[obj(near_row, near_col), obj(far_row, far_col)])
}

/// Desk-scale benchmark description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBenchmark {
    pub n_train: usize,
    pub n_val: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        SyntheticBenchmark {
            n_train: 200,
            n_val: 50,
            width: 128,
            height: 64,
            num_classes: 5,
            max_objects: 5,
            seed: 2024,
        }
    }
}

impl SyntheticBenchmark {
    fn scene_spec(&self, split: &str, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let salt: u64 = if split == "train" { 0x7472 } else { 0x7661 };
        rng.set_stream(salt);
        rng.set_word_pos(index as u128 * 4);
        let seed: u64 = rng.random();
        let num_objects = (seed % (self.max_objects as u64 + 1)) as usize;
        SceneSpec {
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
            num_objects,
            seed,
        }
    }

    fn split(&self, split: &str, n: usize) -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let mut s = generate_scene(&self.scene_spec(split, i))?.sample;
                s.image.id = format!("{split}_{i:04}");
                Ok(s)
            })
            .collect()
    }

    /// `(train, val)` samples.
    pub fn generate(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        Ok((self.split("train", self.n_train)?, self.split("val", self.n_val)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub benchmark: Option<SyntheticBenchmark>,
    pub ids: Vec<String>,
}

/// Writes `image/<id>.png`, `label/<id>.png`, `depth/<id>.depth.png` and
/// `manifest.json` under `dir`.
pub fn export_dataset(dir: &Path, samples: &[Sample], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        io::write_rgb_png(&s.image, &dir.join("image").join(format!("{}.png", s.id())))?;
        if let Some(gt) = &s.gt {
            io::write_label_png(gt, &dir.join("label").join(format!("{}.png", s.id())))?;
        }
        if let Some(d) = &s.depth {
            io::write_depth_png(d, &dir.join("depth").join(format!("{}.depth.png", s.id())))?;
        }
    }
    let bytes = serde_json::to_vec_pretty(manifest)?;
    io::write_atomic(&dir.join("manifest.json"), &bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| crate::types::corrupt(&bytes, &e))?;
    if m.schema != SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: SCHEMA_VERSION.into(),
            found: m.schema,
        });
    }
    Ok(m)
}

/// Loads an exported dataset directory.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Sample>> {
    let m = read_manifest(dir)?;
    m.ids
        .iter()
        .map(|id| {
            let image = io::read_rgb_png(&dir.join("image").join(format!("{id}.png")), id, ImageSource::Synthetic)?;
            let label = dir.join("label").join(format!("{id}.png"));
            let depth = dir.join("depth").join(format!("{id}.depth.png"));
            Ok(Sample {
                image,
                gt: label
                    .exists()
                    .then(|| io::read_label_png(&label, m.num_classes as u8))
                    .transpose()?,
                depth: depth
                    .exists()
                    .then(|| io::read_depth_png(&depth, DepthSource::Synthetic))
                    .transpose()?,
                probs: None,
                pool_tag: PoolTag::Unlabeled,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Raw Cityscapes label id to the 19 evaluated train ids; anything else
/// maps to [`IGNORE`].
pub fn cityscapes_train_id(label_id: u8) -> u8 {
    match label_id {
        7 => 0,
        8 => 1,
        11 => 2,
        12 => 3,
        13 => 4,
        17 => 5,
        19 => 6,
        20 => 7,
        21 => 8,
        22 => 9,
        23 => 10,
        24 => 11,
        25 => 12,
        26 => 13,
        27 => 14,
        28 => 15,
        31 => 16,
        32 => 17,
        33 => 18,
        _ => IGNORE,
    }
}

pub const CITYSCAPES_CLASSES: usize = 19;

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_string_lossy().ends_with("_leftImg8bit.png") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `leftImg8bit/<split>/<city>/*_leftImg8bit.png` with labels from
/// `gtFine/<split>/<city>/*_gtFine_labelIds.png`, resized to
/// `height x width` (bilinear for images, nearest for labels).
pub fn load_cityscapes_dir(root: &Path, split: Split, height: usize, width: usize) -> Result<Vec<Sample>> {
    let img_root = root.join("leftImg8bit").join(split.dir_name());
    let mut out = Vec::new();
    for path in png_files(&img_root)? {
        let rel = path.strip_prefix(&img_root).expect("found under root");
        let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let stem = name.trim_end_matches("_leftImg8bit.png");
        let label_path = root
            .join("gtFine")
            .join(split.dir_name())
            .join(rel.parent().unwrap_or(Path::new("")))
            .join(format!("{stem}_gtFine_labelIds.png"));
        let rgb = image::open(&path)?.into_rgb8();
        let rgb = imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
        let image = io::rgb_from_dynamic(&rgb, stem, ImageSource::Cityscapes)?;
        let gt = if label_path.exists() {
            let raw = image::open(&label_path)?.into_luma8();
            let raw = imageops::resize(&raw, width as u32, height as u32, FilterType::Nearest);
            let labels = Array2::from_shape_fn((height, width), |(i, j)| {
                cityscapes_train_id(raw.get_pixel(j as u32, i as u32)[0])
            });
            Some(LabelMask::new(labels, CITYSCAPES_CLASSES as u8)?)
        } else if split == Split::Test {
            None
        } else {
            return Err(Error::MissingPair {
                image: path.clone(),
                expected: label_path,
            });
        };
        out.push(Sample {
            image,
            gt,
            depth: None,
            probs: None,
            pool_tag: PoolTag::Unlabeled,
        });
    }
    Ok(out)
}

/// Random initial split: `round(initial_label_fraction * N)` labeled.
pub fn initial_split(ids: &[String], config: &ALConfig, seed: u64) -> Result<SamplePool> {
    if ids.len() < 10 {
        return Err(Error::Precondition(format!(
            "initial split needs at least 10 samples, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_lab = (config.initial_label_fraction * shuffled.len() as f64).round() as usize;
    let mut pool = SamplePool::default();
    for (k, id) in shuffled.into_iter().enumerate() {
        if k < n_lab {
            pool.labeled.insert(id);
        } else {
            pool.unlabeled.insert(id);
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_sample;

    fn spec(objects: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            width: 128,
            height: 64,
            num_classes: 5,
            num_objects: objects,
            seed,
        }
    }

    #[test]
    fn zero_objects_gives_background_and_road_only() {
        let s = generate_scene(&spec(0, 1)).unwrap();
        assert_eq!(s.sample.gt.unwrap().classes_present(), vec![0, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&spec(3, 7)).unwrap();
        let b = generate_scene(&spec(3, 7)).unwrap();
        assert_eq!(a, b);
        assert!(validate_sample(&a.sample).is_empty());
    }

    #[test]
    fn nearest_object_is_nearer_than_farthest() {
        let s = generate_scene(&spec(3, 7)).unwrap();
        // Placement record: painting order is far to near.
        let first = s.objects.first().unwrap();
        let last = s.objects.last().unwrap();
        assert!(last.spec.bottom_row > first.spec.bottom_row);
        let near = s.visible_mean_nearness(s.objects.len() - 1).unwrap();
        let far = s.visible_mean_nearness(0).unwrap();
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn ground_nearness_non_decreasing_down_the_road() {
        let s = generate_scene(&spec(0, 3)).unwrap();
        let d = s.sample.depth.unwrap().nearness;
        let gt = s.sample.gt.unwrap().labels;
        let h = d.nrows();
        for j in 0..d.ncols() {
            for i in 1..h {
                if gt[[i, j]] == 1 && gt[[i - 1, j]] == 1 {
                    assert!(d[[i, j]] >= d[[i - 1, j]]);
                }
            }
        }
    }

    #[test]
    fn too_many_objects_is_rejected() {
        let mut s = spec(10_000, 1);
        assert!(matches!(generate_scene(&s), Err(Error::SpecTooSmall { .. })));
        s.width = 8;
        s.num_objects = 0;
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn near_far_pair_objects_are_identical_in_size() {
        let s = near_far_pair_scene(&spec(0, 11), 2).unwrap();
        assert_eq!(s.objects.len(), 2);
        let (far, near) = (&s.objects[0], &s.objects[1]);
        assert_eq!(far.spec.height, near.spec.height);
        assert_eq!(far.spec.width, near.spec.width);
        assert!(near.nearness > far.nearness);
        assert!(s.visible_mask(0).iter().any(|&m| m));
    }

    #[test]
    fn split_sizes_follow_fraction() {
        let ids: Vec<String> = (0..200).map(|i| format!("s{i}")).collect();
        let cfg = ALConfig::default();
        let p = initial_split(&ids, &cfg, 3).unwrap();
        assert_eq!((p.labeled.len(), p.unlabeled.len()), (20, 180));
        assert_eq!(p, initial_split(&ids, &cfg, 3).unwrap());
        let cfg = ALConfig {
            initial_label_fraction: 0.40,
            ..cfg
        };
        assert_eq!(initial_split(&ids, &cfg, 3).unwrap().labeled.len(), 80);
    }

    #[test]
    fn train_id_map_is_a_bijection_on_evaluated_classes() {
        let mut hit = [false; 19];
        for raw in 0..=255u8 {
            let t = cityscapes_train_id(raw);
            if t != IGNORE {
                assert!(!hit[t as usize]);
                hit[t as usize] = true;
            }
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn export_then_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bench = SyntheticBenchmark {
            n_train: 3,
            n_val: 0,
            ..SyntheticBenchmark::default()
        };
        let (train, _) = bench.generate().unwrap();
        let manifest = Manifest {
            schema: SCHEMA_VERSION.into(),
            num_classes: 5,
            width: 128,
            height: 64,
            benchmark: Some(bench),
            ids: train.iter().map(|s| s.id().to_string()).collect(),
        };
        export_dataset(dir.path(), &train, &manifest).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back, train);
    }
}
