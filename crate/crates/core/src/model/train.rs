use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Param, Scalar, UNet};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::types::{Image, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean per-pixel cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
}

impl TrainingReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Mini-batch SGD with momentum on unweighted cross-entropy. Ignore pixels
/// contribute neither loss nor gradient. Per-sample gradients are computed
/// through `exec` and summed in batch order, so results do not depend on
/// the execution mode.
pub fn train<T: Scalar>(
    model: &mut UNet<T>,
    data: &[(&Image, &LabelMask)],
    epochs: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrainingReport> {
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    for (img, gt) in data {
        model.check_image(img)?;
        if gt.shape() != img.shape() {
            return Err(Error::shape(
                format!("{:?}", img.shape()),
                format!("{:?}", gt.shape()),
            ));
        }
    }
    let lr = T::of(model.config.learning_rate);
    let mu = T::of(model.config.momentum);
    let use_bias = model.config.use_bias;
    let mut velocity = model.zero_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pixels = 0usize;
        for batch in order.chunks(model.config.batch_size) {
            let net = &*model;
            let results = exec.map(batch, |&i| net.loss_and_grads(data[i].0, data[i].1));
            let mut total: Option<Vec<Param<T>>> = None;
            let mut count = 0usize;
            for (loss, n, grads) in results {
                loss_sum += loss;
                count += n;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            pixels += count;
            if count == 0 {
                continue;
            }
            let scale = T::one() / T::of(count as f64);
            let grads = total.expect("non-empty batch");
            for ((p, g), v) in model.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                v.w.zip_mut_with(&g.w, |v, &g| *v = mu * *v + g * scale);
                p.w.zip_mut_with(&v.w, |p, &v| *p -= lr * v);
                if use_bias {
                    v.b.zip_mut_with(&g.b, |v, &g| *v = mu * *v + g * scale);
                    p.b.zip_mut_with(&v.b, |p, &v| *p -= lr * v);
                }
            }
        }
        let mean = if pixels > 0 { loss_sum / pixels as f64 } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainingReport {
        epochs_run: epoch_losses.len(),
        epoch_losses,
    })
}
