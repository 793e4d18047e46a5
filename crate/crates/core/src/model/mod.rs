//! Small U-Net style encoder-decoder.
//!
//! Level `l` of the encoder is a 3x3 convolution with ReLU (`enc{l}`),
//! followed by 2x2 max pooling except at the deepest level. Each decoder
//! level upsamples with a 2x2 transposed convolution, concatenates the
//! matching encoder activation and applies a 3x3 convolution with ReLU
//! (`dec{l}`). A 1x1 head produces per-pixel class logits.

mod checkpoint;
pub mod layers;
mod train;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Param, Scalar};
pub use train::{train, TrainingReport};

use crate::error::{Error, Result};
use crate::types::{Image, LabelMask, ProbMap, IGNORE};
use layers::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// `(x - mean) / std` with the ImageNet RGB statistics.
    Imagenet,
    Identity,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_per_cycle: usize,
    pub use_bias: bool,
    pub input_norm: InputNorm,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 16,
            num_classes: 5,
            height: 64,
            width: 128,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 16,
            epochs_per_cycle: 10,
            use_bias: true,
            input_norm: InputNorm::Imagenet,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Hyperparameters of the full-scale setup: 256x512 inputs, SGD with
    /// learning rate 1e-4, batch 16, 100 epochs.
    pub fn full_scale(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            height: 256,
            width: 512,
            epochs_per_cycle: 100,
            ..ModelConfig::default()
        }
    }

    /// Laptop-scale preset used by the synthetic benchmark.
    pub fn desk(num_classes: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 8,
            num_classes,
            height,
            width,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 4,
            epochs_per_cycle: 10,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be at least 4".into()));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::Config("num_classes must lie in [2, 254]".into()));
        }
        let stride = 1usize << (self.levels - 1);
        if self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {stride}",
                self.height, self.width
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Name of the last decoder block, the default GradCAM layer.
    pub fn default_gradcam_layer(&self) -> String {
        if self.levels > 1 {
            "dec0".into()
        } else {
            "enc0".into()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: ModelConfig,
    pub(crate) enc: Vec<Param<T>>,
    pub(crate) up: Vec<Param<T>>,
    pub(crate) dec: Vec<Param<T>>,
    pub(crate) head: Param<T>,
}

/// Replacement activation injected at a named layer during a forward pass.
pub struct Override<'a, T> {
    pub layer: &'a str,
    pub activation: &'a Array3<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache<T> {
    enc_cols: Vec<Array2<T>>,
    enc_out: Vec<Array3<T>>,
    pool_idx: Vec<Vec<u8>>,
    dec_cols: Vec<Array2<T>>,
    dec_out: Vec<Array3<T>>,
}

impl<T> Cache<T> {
    pub(crate) fn activation(&self, layer: &str) -> Option<&Array3<T>> {
        let (kind, l) = parse_layer(layer)?;
        match kind {
            LayerKind::Enc => self.enc_out.get(l),
            LayerKind::Dec => self.dec_out.get(l),
        }
    }

    /// ReLU on/off pattern and pooling decisions, for kink detection.
    pub(crate) fn switching_pattern(&self) -> (Vec<bool>, Vec<u8>)
    where
        T: Scalar,
    {
        let relu = self
            .enc_out
            .iter()
            .chain(&self.dec_out)
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect();
        let pools = self.pool_idx.concat();
        (relu, pools)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Enc,
    Dec,
}

fn parse_layer(name: &str) -> Option<(LayerKind, usize)> {
    if let Some(n) = name.strip_prefix("enc") {
        return n.parse().ok().map(|l| (LayerKind::Enc, l));
    }
    if let Some(n) = name.strip_prefix("dec") {
        return n.parse().ok().map(|l| (LayerKind::Dec, l));
    }
    None
}

fn init_param<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, fan_in: usize, bias: usize) -> Param<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Param {
        w: Array2::from_shape_simple_fn((rows, fan_in), || T::of(rng.random_range(-bound..bound))),
        b: Array1::zeros(bias),
    }
}

impl<T: Scalar> UNet<T> {
    /// Seeded He-uniform initialisation; biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let l = config.levels;
        let mut enc = Vec::with_capacity(l);
        for level in 0..l {
            let cin = if level == 0 { 3 } else { config.channels(level - 1) };
            let cout = config.channels(level);
            enc.push(init_param(&mut rng, cout, cin * 9, cout));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..l.saturating_sub(1) {
            let c = config.channels(level);
            let cin = config.channels(level + 1);
            up.push(init_param(&mut rng, c * 4, cin, c));
            dec.push(init_param(&mut rng, c, 2 * c * 9, c));
        }
        let c0 = config.channels(0);
        let head = init_param(&mut rng, config.num_classes, c0, config.num_classes);
        Ok(UNet {
            config,
            enc,
            up,
            dec,
            head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            enc: self.enc.iter().map(Param::cast).collect(),
            up: self.up.iter().map(Param::cast).collect(),
            dec: self.dec.iter().map(Param::cast).collect(),
            head: self.head.cast(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.enc.len()).map(|l| format!("enc{l}")).collect();
        names.extend((0..self.dec.len()).rev().map(|l| format!("dec{l}")));
        names
    }

    pub fn has_layer(&self, layer: &str) -> bool {
        match parse_layer(layer) {
            Some((LayerKind::Enc, l)) => l < self.enc.len(),
            Some((LayerKind::Dec, l)) => l < self.dec.len(),
            None => false,
        }
    }

    /// Named parameters in a fixed order: `enc*`, `up*`, `dec*`, `head`.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (l, p) in self.enc.iter().enumerate() {
            out.push((format!("enc{l}"), p));
        }
        for (l, p) in self.up.iter().enumerate() {
            out.push((format!("up{l}"), p));
        }
        for (l, p) in self.dec.iter().enumerate() {
            out.push((format!("dec{l}"), p));
        }
        out.push(("head".into(), &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.enc
            .iter_mut()
            .chain(self.up.iter_mut())
            .chain(self.dec.iter_mut())
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    pub fn head_mut(&mut self) -> &mut Param<T> {
        &mut self.head
    }

    pub(crate) fn zero_grads(&self) -> Vec<Param<T>> {
        self.enc
            .iter()
            .chain(&self.up)
            .chain(&self.dec)
            .chain(std::iter::once(&self.head))
            .map(Param::zeros_like)
            .collect()
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let want = (self.config.height, self.config.width);
        if image.shape() != want {
            return Err(Error::shape(
                format!("{}x{}", want.0, want.1),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        Ok(())
    }

    pub(crate) fn input_tensor(&self, image: &Image) -> Array3<T> {
        match self.config.input_norm {
            InputNorm::Identity => image.pixels.mapv(|v| T::of(v as f64)),
            InputNorm::Imagenet => {
                let mut x = Array3::zeros(image.pixels.dim());
                for (c, (mean, std)) in IMAGENET_MEAN.iter().zip(IMAGENET_STD).enumerate() {
                    let src = image.pixels.slice(s![c, .., ..]);
                    x.slice_mut(s![c, .., ..])
                        .zip_mut_with(&src, |d, &v| *d = T::of((v as f64 - mean) / std));
                }
                x
            }
        }
    }

    /// Forward pass returning logits `(C, H, W)` and the activation cache.
    pub(crate) fn forward(&self, x: &Array3<T>, ov: Option<&Override<T>>) -> (Array3<T>, Cache<T>) {
        let levels = self.enc.len();
        let ov_target = ov.and_then(|o| parse_layer(o.layer).map(|t| (t, o.activation)));
        let mut cache = Cache {
            enc_cols: Vec::with_capacity(levels),
            enc_out: Vec::with_capacity(levels),
            pool_idx: Vec::new(),
            dec_cols: vec![Array2::zeros((0, 0)); self.dec.len()],
            dec_out: vec![Array3::zeros((0, 0, 0)); self.dec.len()],
        };
        for (level, p) in self.enc.iter().enumerate() {
            let pooled;
            let input = if level == 0 {
                x
            } else {
                let (y, idx) = maxpool2(&cache.enc_out[level - 1]);
                cache.pool_idx.push(idx);
                pooled = y;
                &pooled
            };
            let (_, h, w) = input.dim();
            let cols = im2col3(input.view());
            let mut a = affine(p, cols.view(), h, w);
            relu_inplace(&mut a);
            if let Some(((LayerKind::Enc, l), act)) = ov_target {
                if l == level {
                    a = act.clone();
                }
            }
            cache.enc_cols.push(cols);
            cache.enc_out.push(a);
        }
        let mut d = cache.enc_out[levels - 1].clone();
        for level in (0..self.dec.len()).rev() {
            let u = upconv2(&self.up[level], &d);
            let cat = concat(&u, &cache.enc_out[level]);
            let (_, h, w) = cat.dim();
            let cols = im2col3(cat.view());
            let mut a = affine(&self.dec[level], cols.view(), h, w);
            relu_inplace(&mut a);
            if let Some(((LayerKind::Dec, l), act)) = ov_target {
                if l == level {
                    a = act.clone();
                }
            }
            cache.dec_cols[level] = cols;
            cache.dec_out[level] = a.clone();
            d = a;
        }
        let (_, h, w) = d.dim();
        let c = d.dim().0;
        let d2 = d.into_shape_with_order((c, h * w)).expect("standard layout");
        let logits = affine(&self.head, d2.view(), h, w);
        (logits, cache)
    }

    /// Back-propagates `dlogits`, accumulating into `grads` (ordered as
    /// [`UNet::params`]). Returns the gradient with respect to the
    /// post-ReLU activation of `capture` when requested.
    pub(crate) fn backward(
        &self,
        cache: &Cache<T>,
        dlogits: &Array3<T>,
        grads: &mut [Param<T>],
        capture: Option<&str>,
    ) -> Option<Array3<T>> {
        let levels = self.enc.len();
        let n_up = self.up.len();
        let (gi_enc, gi_up, gi_dec, gi_head) = (0, levels, levels + n_up, levels + 2 * n_up);
        let want = capture.and_then(parse_layer);
        let mut captured = None;

        let last = if self.dec.is_empty() {
            &cache.enc_out[levels - 1]
        } else {
            &cache.dec_out[0]
        };
        let (c0, h, w) = last.dim();
        let last2 = last.view().into_shape_with_order((c0, h * w)).expect("layout");
        let mut dd = affine_backward(&self.head, &mut grads[gi_head], last2, dlogits, true)
            .expect("requested")
            .into_shape_with_order((c0, h, w))
            .expect("layout");

        let mut denc: Vec<Option<Array3<T>>> = vec![None; levels];
        for level in 0..self.dec.len() {
            if want == Some((LayerKind::Dec, level)) {
                captured = Some(dd.clone());
            }
            let dz = relu_backward(&dd, &cache.dec_out[level]);
            let (_, h, w) = dz.dim();
            let c = self.config.channels(level);
            let dcols = affine_backward(
                &self.dec[level],
                &mut grads[gi_dec + level],
                cache.dec_cols[level].view(),
                &dz,
                true,
            )
            .expect("requested");
            let dcat = col2im3(dcols.view(), 2 * c, h, w);
            let du = dcat.slice(s![..c, .., ..]).to_owned();
            let dskip = dcat.slice(s![c.., .., ..]).to_owned();
            add_into(&mut denc[level], dskip);
            let up_in = if level + 1 < self.dec.len() {
                &cache.dec_out[level + 1]
            } else {
                &cache.enc_out[levels - 1]
            };
            dd = upconv2_backward(&self.up[level], &mut grads[gi_up + level], up_in, &du);
        }
        add_into(&mut denc[levels - 1], dd);

        for level in (0..levels).rev() {
            let g = denc[level].take().expect("every encoder level receives gradient");
            if want == Some((LayerKind::Enc, level)) {
                captured = Some(g.clone());
            }
            let need_input = level > 0;
            let dz = relu_backward(&g, &cache.enc_out[level]);
            let dcols = affine_backward(
                &self.enc[level],
                &mut grads[gi_enc + level],
                cache.enc_cols[level].view(),
                &dz,
                need_input,
            );
            if let Some(dcols) = dcols {
                let (_, ph, pw) = cache.enc_out[level].dim();
                let cin = self.config.channels(level - 1);
                let dpool = col2im3(dcols.view(), cin, ph, pw);
                let (_, h, w) = cache.enc_out[level - 1].dim();
                let dprev = maxpool2_backward(&dpool, &cache.pool_idx[level - 1], h, w);
                add_into(&mut denc[level - 1], dprev);
            }
        }
        captured
    }

    pub fn logits(&self, image: &Image) -> Result<Array3<T>> {
        self.check_image(image)?;
        Ok(self.forward(&self.input_tensor(image), None).0)
    }

    /// Softmax class probabilities at every pixel.
    pub fn predict_probs(&self, image: &Image) -> Result<ProbMap> {
        let logits = self.logits(image)?.mapv(|v| v.as_f64());
        Ok(ProbMap::from_logits(&logits))
    }

    pub fn predict_mask(&self, image: &Image) -> Result<LabelMask> {
        Ok(self.predict_probs(image)?.argmax())
    }

    /// Activations of `layer` and the exact gradient of the class score
    /// `y^c = Σ_{i,j} logit_c(i,j)` with respect to them.
    pub fn class_score_with_grads(
        &self,
        image: &Image,
        target_class: usize,
        layer: &str,
    ) -> Result<GradCamContext> {
        self.class_score_with_grads_roi(image, target_class, layer, None)
    }

    /// As [`UNet::class_score_with_grads`] with the class score restricted
    /// to a region of interest: `y^c = Σ_{i,j} roi(i,j) · logit_c(i,j)`.
    pub fn class_score_with_grads_roi(
        &self,
        image: &Image,
        target_class: usize,
        layer: &str,
        roi: Option<&Array2<f64>>,
    ) -> Result<GradCamContext> {
        if target_class >= self.num_classes() {
            return Err(Error::Precondition(format!(
                "target class {target_class} not below C = {}",
                self.num_classes()
            )));
        }
        if !self.has_layer(layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        self.check_image(image)?;
        let x = self.input_tensor(image);
        let (logits, cache) = self.forward(&x, None);
        let mut dlogits = Array3::zeros(logits.dim());
        let class_logits = logits.slice(s![target_class, .., ..]);
        let score = match roi {
            None => {
                dlogits.slice_mut(s![target_class, .., ..]).fill(T::one());
                class_logits.iter().map(|v| v.as_f64()).sum()
            }
            Some(r) => {
                if r.dim() != class_logits.dim() {
                    return Err(Error::shape(format!("{:?}", class_logits.dim()), format!("{:?}", r.dim())));
                }
                dlogits
                    .slice_mut(s![target_class, .., ..])
                    .zip_mut_with(r, |d, &w| *d = T::of(w));
                class_logits.iter().zip(r).map(|(v, &w)| w * v.as_f64()).sum()
            }
        };
        let mut grads = self.zero_grads();
        let g = self
            .backward(&cache, &dlogits, &mut grads, Some(layer))
            .expect("layer validated above");
        Ok(GradCamContext {
            layer: layer.to_string(),
            target_class,
            score,
            activations: cache.activation(layer).expect("validated").mapv(|v| v.as_f64()),
            gradients: g.mapv(|v| v.as_f64()),
        })
    }

    /// Class score `y^c` after replacing the activation of `layer`; also
    /// returns the switching pattern of every ReLU and pool downstream.
    pub fn class_score_with_override(
        &self,
        image: &Image,
        target_class: usize,
        layer: &str,
        activation: &Array3<T>,
    ) -> Result<(f64, (Vec<bool>, Vec<u8>))> {
        if !self.has_layer(layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        self.check_image(image)?;
        let x = self.input_tensor(image);
        let ov = Override { layer, activation };
        let (logits, cache) = self.forward(&x, Some(&ov));
        let score = logits
            .slice(s![target_class, .., ..])
            .iter()
            .map(|v| v.as_f64())
            .sum();
        Ok((score, cache.switching_pattern()))
    }

    /// Per-pixel softmax cross-entropy summed over non-ignore pixels, its
    /// gradient with respect to the parameters, and the pixel count.
    pub(crate) fn loss_and_grads(&self, image: &Image, gt: &LabelMask) -> (f64, usize, Vec<Param<T>>) {
        let x = self.input_tensor(image);
        let (logits, cache) = self.forward(&x, None);
        let (c, h, w) = logits.dim();
        let mut dlogits = Array3::zeros((c, h, w));
        let mut loss = 0.0f64;
        let mut count = 0usize;
        let mut p = vec![0.0f64; c];
        for i in 0..h {
            for j in 0..w {
                let label = gt.labels[[i, j]];
                if label == IGNORE {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    p[k] = logits[[k, i, j]].as_f64();
                    max = max.max(p[k]);
                }
                let mut sum = 0.0;
                for v in p.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let label = label as usize;
                loss -= (p[label] / sum).ln();
                for k in 0..c {
                    let target = if k == label { 1.0 } else { 0.0 };
                    dlogits[[k, i, j]] = T::of(p[k] / sum - target);
                }
                count += 1;
            }
        }
        let mut grads = self.zero_grads();
        self.backward(&cache, &dlogits, &mut grads, None);
        (loss, count, grads)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Array3<T>>, v: Array3<T>) {
    match slot {
        Some(acc) => *acc += &v,
        None => *slot = Some(v),
    }
}

/// Everything GradCAM needs for one class on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamContext {
    pub layer: String,
    pub target_class: usize,
    /// `y^c`, the summed pre-softmax logit of the target class.
    pub score: f64,
    /// `f_k(i,j)`, shape `(K, h, w)`.
    pub activations: Array3<f64>,
    /// `∂y^c / ∂f_k(i,j)`, same shape.
    pub gradients: Array3<f64>,
}

impl GradCamContext {
    /// Sum of the positive gradient entries.
    pub fn positive_gradient_sum(&self) -> f64 {
        self.gradients.iter().filter(|&&g| g > 0.0).sum()
    }
}
