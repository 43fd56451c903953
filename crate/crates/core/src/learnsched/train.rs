use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledExample;
use super::net::{Params, SchedulerNet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            epochs: 100,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the dataset after each epoch.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub accuracy: f64,
}

struct Prepared {
    keys: Vec<f64>,
    values: Vec<f64>,
    tokens: usize,
    label: usize,
}

fn prepare(net: &SchedulerNet, dataset: &[LabeledExample]) -> Result<Vec<Prepared>> {
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let shape = net.shape();
    dataset
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.label >= net.classes() {
                return Err(Error::Input(format!(
                    "example {i} has label {} but the net has {} classes",
                    e.label,
                    net.classes()
                )));
            }
            if e.d_k != shape.d_k || e.d_v != shape.d_v {
                return Err(Error::Config(format!(
                    "example {i} features ({}, {}) do not match net ({}, {})",
                    e.d_k, e.d_v, shape.d_k, shape.d_v
                )));
            }
            Ok(Prepared {
                keys: e.keys_f64(),
                values: e.values_f64(),
                tokens: e.tokens,
                label: e.label,
            })
        })
        .collect()
}

/// Mean cross-entropy and accuracy of `net` over `dataset`.
pub fn evaluate(net: &SchedulerNet, dataset: &[LabeledExample]) -> Result<(f64, f64)> {
    let data = prepare(net, dataset)?;
    eval_prepared(net, &data)
}

fn eval_prepared(net: &SchedulerNet, data: &[Prepared]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in data {
        let f = net.forward(&e.keys, &e.values, e.tokens)?;
        loss -= f.probs[e.label].max(f64::MIN_POSITIVE).ln();
        if crate::tinylm::argmax(&f.probs) == e.label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch gradient descent with momentum on mean cross-entropy.
///
/// Batch order is shuffled from `cfg.seed`, so the result is a pure
/// function of the initial net, the data and the config.
pub fn train(net: &mut SchedulerNet, dataset: &[LabeledExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) || cfg.batch == 0 {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    let data = prepare(net, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = Params::zeros_like(&net.params);
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let mut grad = Params::zeros_like(&net.params);
            for &i in batch {
                let e = &data[i];
                let (loss, g) = net.loss_and_grad(&e.keys, &e.values, e.tokens, e.label)?;
                if !loss.is_finite() {
                    return Err(Error::Config(format!(
                        "non-finite loss at epoch {epoch}; learning rate {} is likely too high",
                        cfg.lr
                    )));
                }
                grad.axpy(1.0 / batch.len() as f64, &g);
            }
            velocity.scale(cfg.momentum);
            velocity.axpy(1.0, &grad);
            net.params.axpy(-cfg.lr, &velocity);
            if !net.params.all_finite() {
                return Err(Error::Config(format!(
                    "parameters diverged at epoch {epoch}; learning rate {} is likely too high",
                    cfg.lr
                )));
            }
        }
        let (loss, _) = eval_prepared(net, &data)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("non-finite loss after epoch {epoch}")));
        }
        losses.push(loss);
    }
    let (final_loss, accuracy) = eval_prepared(net, &data)?;
    Ok(TrainReport {
        losses,
        final_loss,
        accuracy,
    })
}
