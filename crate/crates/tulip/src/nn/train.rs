//! Minibatch training of bare networks, plus the optimizer state shared
//! with the multi-exit trainer.
//!
//! Determinism contract: all randomness (shuffling, dropout masks) comes
//! from one ChaCha stream seeded by `TrainConfig::seed`, batches are
//! visited in shuffled index order, and gradient accumulation follows a
//! fixed order, so identical configs and seeds reproduce the exact
//! parameter trajectory.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::loss::cross_entropy_grad;
use super::spectral::normalize_configured;
use super::{Mode, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Loss selector for the generic trainer. Multi-class cross entropy is
/// the only proper scoring rule the models here need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, multiplier)` pairs; at the start of each listed 1-based
    /// epoch the current rate is multiplied by the factor.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for &(epoch, factor) in &self.lr_schedule {
            if epoch == 0 || !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "lr schedule entry ({epoch}, {factor}) invalid: epochs are 1-based, factors positive"
                )));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            lr_schedule: Vec::new(),
            seed: 0,
        }
    }
}

/// Optimizer state over a flat parameter vector. Callers apply updates
/// tensor by tensor at fixed offsets into that vector.
pub enum OptState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
        bias1: f64,
        bias2: f64,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(kind: OptimizerKind, total_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam {
                m: vec![0.0; total_params],
                v: vec![0.0; total_params],
                t: 0,
                bias1: 1.0,
                bias2: 1.0,
            },
        }
    }

    /// Advances the step counter; call once per optimizer step, before
    /// the per-tensor updates of that step.
    pub fn begin_step(&mut self) {
        if let OptState::Adam { t, bias1, bias2, .. } = self {
            *t += 1;
            *bias1 *= ADAM_BETA1;
            *bias2 *= ADAM_BETA2;
        }
    }

    /// Updates one tensor slice; `offset` is its start in the flat
    /// parameter vector.
    pub fn apply(&mut self, lr: f64, offset: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptState::Adam { m, v, bias1, bias2, .. } => {
                let m = &mut m[offset..offset + params.len()];
                let v = &mut v[offset..offset + params.len()];
                let corr1 = 1.0 - *bias1;
                let corr2 = 1.0 - *bias2;
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[i] / corr1;
                    let v_hat = v[i] / corr2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Shuffled minibatch index ranges for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn gather_rows(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Applies any schedule entries for this 1-based epoch to the rate.
pub(crate) fn scheduled_rate(base: f64, schedule: &[(usize, f64)], epoch: usize, current: f64) -> f64 {
    let _ = base;
    let mut rate = current;
    for &(e, factor) in schedule {
        if e == epoch {
            rate *= factor;
        }
    }
    rate
}

/// Trains a bare network with the chosen loss on `(x, labels)`. Returns
/// the per-epoch mean training loss (length = epochs). Fails with
/// `TrainingDiverged` if a batch loss goes non-finite.
pub fn train(
    net: &mut Network,
    x: &ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
    loss: Loss,
) -> Result<Vec<f64>> {
    config.validate()?;
    let Loss::CrossEntropy = loss;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} training rows vs {} labels",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptState::new(config.optimizer, net.param_count());
    let mut rate = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        rate = scheduled_rate(config.learning_rate, &config.lr_schedule, epoch, rate);
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(n, config.batch_size, &mut rng) {
            let xb = gather_rows(x, &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let trace = net.forward_trace(&xb.view(), Mode::Train(&mut rng))?;
            let (batch_loss, dlogits) = cross_entropy_grad(&trace.output().view(), &yb)?;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let (grads, _) = net.backward(&trace, &dlogits.view(), &[]);
            opt.begin_step();
            let mut offset = 0;
            let mut slot = 0;
            net.visit_dense_mut(&mut |layer| {
                let g = &grads.slots[slot];
                opt.apply(rate, offset, layer.weights.as_slice_mut().unwrap(), g.dw.as_slice().unwrap());
                offset += g.dw.len();
                opt.apply(rate, offset, layer.bias.as_slice_mut().unwrap(), g.db.as_slice().unwrap());
                offset += g.db.len();
                slot += 1;
            });
            normalize_configured(net);
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(history)
}
