//! Adam training of the latent network with milestone learning-rate decay and
//! best-validation checkpointing.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LatentNet, ReducedRecord};
use crate::prior::stream_rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Random streams under the training seed.
const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// `None` trains on the full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub alpha_d: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Evaluate mini-batches in fixed parallel chunks.
    #[serde(default)]
    pub parallel: bool,
}

fn default_decay() -> f64 {
    0.5
}

fn default_validation() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::invalid("milestones must be strictly increasing and below the epoch count"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay factor must lie in (0, 1]"));
        }
        if self.alpha_d != 0.0 && self.alpha_d != 1.0 {
            return Err(Error::invalid("alpha_d must be 0 or 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    pub records: Vec<ReducedRecord>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl TrainingDataset {
    /// Seeded random split with `round(fraction * n)` validation records.
    pub fn split(records: Vec<ReducedRecord>, validation_fraction: f64, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let first = &records[0];
        let shape = (first.m_r.len(), first.z.len(), first.u_r.len());
        if records.iter().any(|r| (r.m_r.len(), r.z.len(), r.u_r.len()) != shape) {
            return Err(Error::invalid("records have inconsistent dimensions"));
        }
        let n = records.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
        let n_val = ((validation_fraction * n as f64).round() as usize).min(n - 1);
        let mut validation = idx[..n_val].to_vec();
        let mut train = idx[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(TrainingDataset { records, train, validation })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub state_term: f64,
    pub jac_m_term: f64,
    pub jac_z_term: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: LatentNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Denominators floored during training; nonzero values are worth a warning.
    pub floored_denominators: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Fresh network of the given widths, initialized from the training seed.
pub fn init_net(widths: &[usize], seed: u64) -> Result<LatentNet> {
    LatentNet::random(widths, &mut stream_rng(seed, INIT_STREAM))
}

const PARALLEL_CHUNK: usize = 16;

/// Trains `net` in place from its current parameters.
pub fn train(net: &LatentNet, data: &TrainingDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut net = net.clone();
    let mut params = net.params();
    let mut adam = Adam::new(params.len());
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let batch_size = config.batch_size.unwrap_or(data.train.len()).min(data.train.len());
    let val: Vec<&ReducedRecord> = data.validation.iter().map(|&i| &data.records[i]).collect();
    let mut order = data.train.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut floored = 0;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut st, mut jm, mut jz) = (0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&ReducedRecord> = chunk.iter().map(|&i| &data.records[i]).collect();
            let e = if config.parallel {
                net.h1_loss_parallel(&batch, config.alpha_d, PARALLEL_CHUNK)?
            } else {
                net.h1_loss(&batch, config.alpha_d)?
            };
            if !e.loss.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            floored += e.floored;
            let k = batch.len() as f64;
            sum += e.loss * k;
            st += e.state_term * k;
            jm += e.jac_m_term * k;
            jz += e.jac_z_term * k;
            adam.step(&mut params, &e.grad, lr);
            net.set_params(&params)?;
        }
        let n = order.len() as f64;
        let validation_loss = if val.is_empty() { sum / n } else { net.evaluate_loss(&val, config.alpha_d)?.loss };
        if validation_loss < best.0 {
            best = (validation_loss, epoch, params.clone());
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: sum / n,
            validation_loss,
            state_term: st / n,
            jac_m_term: jm / n,
            jac_z_term: jz / n,
        });
    }
    net.set_params(&best.2)?;
    Ok(TrainOutcome { net, history, best_epoch: best.1, floored_denominators: floored })
}
