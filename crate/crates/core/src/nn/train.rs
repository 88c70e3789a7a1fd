use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Network, Scalar};
use crate::error::{Error, Result};
use crate::patch::{Augmentation, Patch, PATCH_LEN};

/// Loss is sampled on the monitor set every this many iterations.
pub const LOSS_INTERVAL: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Random flips and color-channel permutations per drawn sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            learning_rate: 1e-5,
            iterations: 2000,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and iterations must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// `(iteration, loss)` on the fixed, unaugmented monitor set.
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve.first().map_or(f64::NAN, |p| p.1)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().map_or(f64::NAN, |p| p.1)
    }
}

fn push_patch<T: Scalar>(buf: &mut Vec<T>, p: &Patch) {
    buf.extend(p.data.iter().map(|&v| T::from_f32_lossy(v)));
}

/// Mini-batch SGD on the mean squared reconstruction error. Samples are
/// drawn epoch-wise from a seeded shuffle; the monitor set is the first
/// `min(batch_size, n)` patches.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    patches: &[Patch],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidParameter("no training patches".into()));
    }
    if net.input_len() != PATCH_LEN {
        return Err(Error::DimensionMismatch {
            expected: PATCH_LEN,
            actual: net.input_len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_monitor = cfg.batch_size.min(patches.len());
    let mut monitor = Vec::with_capacity(n_monitor * PATCH_LEN);
    for p in &patches[..n_monitor] {
        push_patch(&mut monitor, p);
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let lr = T::lit(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(cfg.batch_size * PATCH_LEN);

    let record = |net: &Network<T>, it: usize, report: &mut TrainReport| -> Result<()> {
        let loss = net
            .reconstruction_loss(&monitor, n_monitor)
            .to_f64()
            .unwrap();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        report.loss_curve.push((it, loss));
        Ok(())
    };

    for it in 0..cfg.iterations {
        if it % LOSS_INTERVAL == 0 {
            record(net, it, &mut report)?;
        }
        batch.clear();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = &patches[order[cursor]];
            cursor += 1;
            if cfg.augment {
                push_patch(&mut batch, &Augmentation::random(&mut rng).apply(p));
            } else {
                push_patch(&mut batch, p);
            }
        }
        let (loss, grads) = net.loss_and_gradients(&batch, cfg.batch_size);
        let loss_f = loss.to_f64().unwrap();
        if !loss_f.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: loss_f,
            });
        }
        for (layer, lg) in net.layers.iter_mut().zip(&grads) {
            for (p, g) in layer.params.iter_mut().zip(lg) {
                for (pv, &gv) in p.iter_mut().zip(g) {
                    *pv = *pv - lr * gv;
                }
            }
        }
    }
    record(net, cfg.iterations, &mut report)?;
    Ok(report)
}
