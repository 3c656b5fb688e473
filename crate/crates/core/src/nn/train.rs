use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::gcn::{gcn_backward, gcn_forward, Dropout};
use super::params::{GcnParams, GcnShape, ParamVector};
use crate::error::{Error, Result};
use crate::graph::ClientShard;
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with L2 decay folded into the gradient.
    Sgd,
    /// Adam with L2 decay folded into the gradient; moments reset per call.
    Adam,
}

/// Local optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Passes over the local training nodes per call.
    pub epochs: usize,
    /// Training nodes per gradient step.
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 5e-4,
            dropout: 0.5,
            epochs: 20,
            batch: 128,
            optimizer: OptimizerKind::Adam,
            seed: 2025,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(key("lr"), "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(key("weight_decay"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(key("dropout"), "must lie in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(Error::config(key("batch"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ParamVector,
    pub steps: usize,
    /// The shard had no training nodes; `params` is the start vector.
    pub no_train_data: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((w, g), m), v) in theta
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Runs `cfg.epochs` passes of mini-batch training on the shard's training
/// nodes, starting from `start`. The random stream is keyed by
/// `(cfg.seed, client_id, round)`.
pub fn local_train(
    shard: &ClientShard,
    shape: GcnShape,
    start: &ParamVector,
    cfg: &TrainConfig,
    round: u64,
) -> Result<LocalUpdate> {
    let train_nodes: Vec<usize> = shard
        .local
        .train_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    if train_nodes.is_empty() {
        return Ok(LocalUpdate {
            params: start.clone(),
            steps: 0,
            no_train_data: true,
        });
    }
    let mut rng = rng_for(cfg.seed, &[stream::LOCAL_TRAIN, shard.client_id as u64, round]);
    let mut theta = start.clone();
    let mut adam = matches!(cfg.optimizer, OptimizerKind::Adam).then(|| Adam::new(theta.len()));
    let mut order = train_nodes;
    let mut mask = vec![false; shard.num_nodes()];
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            mask.iter_mut().for_each(|m| *m = false);
            batch.iter().for_each(|&i| mask[i] = true);
            let dropout = Dropout {
                p: cfg.dropout,
                seed: rng.next_u64(),
            };
            let params = GcnParams::unflatten(shape, &theta)?;
            let (logits, cache) = gcn_forward(&params, &shard.a_hat, &shard.local.features, Some(dropout))?;
            let grad = gcn_backward(
                &params,
                &shard.a_hat,
                &shard.local.features,
                &cache,
                &logits,
                &shard.local.labels,
                &mask,
                cfg.weight_decay,
            )?;
            match adam.as_mut() {
                Some(adam) => adam.step(&mut theta, &grad, cfg.lr),
                None => theta.axpy(-cfg.lr, &grad),
            }
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        params: theta,
        steps,
        no_train_data: false,
    })
}
