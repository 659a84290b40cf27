//! SGD with momentum, step learning-rate decay and evaluation.

use chanprune_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::model::{Mode, TrainedNet};
use crate::{Error, Result};

pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Epochs (0-based) at which the rate is multiplied by `decay_factor`.
    /// Empty means 50% and 75% of the budget.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize, seed: u64) -> Self {
        Self {
            lr,
            decay_factor: default_decay(),
            decay_epochs: Vec::new(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("negative weight decay".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn decay_points(&self) -> Vec<usize> {
        if self.decay_epochs.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.decay_epochs.clone()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_points().iter().filter(|&&e| e > 0 && epoch >= e).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

/// Momentum buffers, one per parameter tensor (unused for running stats).
#[derive(Clone, Debug)]
pub struct SgdState<S> {
    velocity: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(net: &TrainedNet<S>) -> Self {
        Self {
            velocity: net
                .spec()
                .params()
                .iter()
                .zip(net.params())
                .map(|(d, t)| d.role.trainable().then(|| vec![S::zero(); t.len()]))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// One SGD step on a batch; returns the batch loss.
pub fn sgd_step<S: Scalar>(
    net: &mut TrainedNet<S>,
    state: &mut SgdState<S>,
    x: &Tensor<S>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let pass = net.forward(x, Some(labels), Mode::Train)?;
    let loss = pass.loss_value().expect("labels given");
    let mut grads = pass.backward()?;
    net.update_running_stats(&pass);
    let (lr, m, wd) = (S::lit(lr), S::lit(cfg.momentum), S::lit(cfg.weight_decay));
    let roles: Vec<_> = net.spec().params().iter().map(|d| d.role).collect();
    for (i, w) in net.params_mut().iter_mut().enumerate() {
        let (Some(var), Some(v)) = (pass.params[i], state.velocity[i].as_mut()) else {
            continue;
        };
        let Some(g) = grads.take(var) else { continue };
        let decay = if roles[i].decays() { wd } else { S::zero() };
        for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vv = m * *vv + gv + decay * *wv;
            *wv -= lr * *vv;
        }
    }
    for (d, w) in net.spec().params().iter().zip(net.params()) {
        if !w.is_finite() {
            return Err(Error::Layer {
                layer: d.name.clone(),
                source: chanprune_tensor::Error::NonFinite("parameter after SGD update".into()),
            });
        }
    }
    Ok(loss)
}

/// One pass over the training split in a seeded shuffle order. Trailing
/// batches of a single sample are dropped (batch statistics need two).
pub fn sgd_epoch<S: Scalar>(
    net: &mut TrainedNet<S>,
    state: &mut SgdState<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Config(format!("training split has {} samples", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    let lr = cfg.lr_at(epoch);
    let mut total = 0.0;
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (x, y) = data.batch::<S>(chunk)?;
        total += sgd_step(net, state, &x, &y, lr, cfg)? * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(total / seen as f64)
}

/// Runs `cfg.epochs` epochs. With `eval_every > 0` the validation accuracy
/// is recorded every that many epochs and after the last.
pub fn fine_tune<S: Scalar>(net: &mut TrainedNet<S>, split: &Split, cfg: &TrainConfig, eval_every: usize) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut state = SgdState::new(net);
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let train_loss = sgd_epoch(net, &mut state, &split.train, cfg, epoch)?;
        let last = epoch + 1 == cfg.epochs;
        let val_accuracy = if eval_every > 0 && ((epoch + 1) % eval_every == 0 || last) {
            Some(evaluate(net, &split.val)?)
        } else {
            None
        };
        out.push(EpochMetrics {
            epoch,
            lr: cfg.lr_at(epoch),
            train_loss,
            val_accuracy,
        });
    }
    Ok(out)
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<S: Scalar>(net: &TrainedNet<S>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<S>(chunk)?;
        let logits = net.logits(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean eval-mode cross-entropy.
pub fn eval_loss<S: Scalar>(net: &TrainedNet<S>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<S>(chunk)?;
        let pass = net.forward(&x, Some(&y), Mode::Eval)?;
        total += pass.loss_value().expect("labels given") * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// First index of the largest entry.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
