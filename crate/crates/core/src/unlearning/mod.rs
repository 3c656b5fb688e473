//! Gradient-corrected unlearning of one departing client.
//!
//! Each epoch computes a forgetting direction from the NPO and MIA-margin
//! losses on the departing shard, a retain direction from one local epoch on
//! every retained shard, removes the component of the former that opposes the
//! latter, and applies the scaled result under a step clip and a drift ball.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{find_shard, global_accuracy, mia_rate, shard_losses, MiaThreshold, Split};
use crate::federation::{renormalize, ServerState};
use crate::graph::ClientShard;
use crate::nn::{
    backward_from_logits, gcn_forward, gcn_logits, local_train, log_prob_of_label, softmax, Dropout, GcnParams,
    GcnShape, OptimizerKind, ParamVector, TrainConfig,
};
use crate::seed::{derive_seed, stream};

/// Lower clamp on reference probabilities inside the NPO ratio.
pub const P_REF_FLOOR: f64 = 1e-12;
/// Retain directions with norm at or below this are treated as absent.
pub const RETAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub beta: f64,
    pub scale: f64,
    pub clip: f64,
    pub drift_radius: f64,
    pub margin: f64,
    pub margin_weight: f64,
    /// Disable to apply the raw forgetting direction (ablation).
    pub gradient_correction: bool,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-2,
            dropout: 0.3,
            beta: 5.0,
            scale: 50.0,
            clip: 10.0,
            drift_radius: 10.0,
            margin: 0.5,
            margin_weight: 3.0,
            gradient_correction: true,
            seed: 2025,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !positive(self.beta) {
            return Err(Error::config(key("beta"), "must be > 0"));
        }
        if !positive(self.drift_radius) {
            return Err(Error::config(key("drift_radius"), "must be > 0"));
        }
        if !positive(self.clip) {
            return Err(Error::config(key("clip"), "must be > 0"));
        }
        if !non_negative(self.lr) {
            return Err(Error::config(key("lr"), "must be >= 0"));
        }
        if !non_negative(self.scale) {
            return Err(Error::config(key("scale"), "must be >= 0"));
        }
        if !non_negative(self.margin) {
            return Err(Error::config(key("margin"), "must be >= 0"));
        }
        if !non_negative(self.margin_weight) {
            return Err(Error::config(key("margin_weight"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(key("dropout"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Value and logit gradient of the combined forgetting objective.
#[derive(Debug, Clone)]
pub struct ForgetLoss {
    pub npo: f64,
    pub margin: f64,
    pub dlogits: Array2<f64>,
}

/// `(2/β)·log(1 + exp(β(lp − lr)))` for one node, computed stably.
pub fn npo_term(log_p: f64, log_ref: f64, beta: f64) -> f64 {
    let z = beta * (log_p - log_ref.max(P_REF_FLOOR.ln()));
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    2.0 / beta * softplus
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// NPO loss plus the margin hinge, averaged over `nodes`, with its gradient
/// with respect to the logits. `ref_log_p[k]` belongs to `nodes[k]`.
pub fn forget_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    nodes: &[usize],
    ref_log_p: &[f64],
    tau_pre: f64,
    cfg: &UnlearnConfig,
) -> ForgetLoss {
    let log_p = log_prob_of_label(logits, labels);
    let probs = softmax(logits);
    let m = nodes.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let (mut npo, mut margin) = (0.0, 0.0);
    for (&i, &lr) in nodes.iter().zip(ref_log_p) {
        let lp = log_p[i];
        npo += npo_term(lp, lr, cfg.beta);
        // d npo / d log p
        let mut coeff = 2.0 * sigmoid(cfg.beta * (lp - lr.max(P_REF_FLOOR.ln())));
        let gap = tau_pre + cfg.margin + lp;
        if gap > 0.0 {
            margin += cfg.margin_weight * gap;
            coeff += cfg.margin_weight;
        }
        // d log p_y / d logits = onehot(y) − softmax
        let mut row = dlogits.row_mut(i);
        row.assign(&probs.row(i));
        row.mapv_inplace(|v| -coeff * v / m);
        row[labels[i]] += coeff / m;
    }
    ForgetLoss {
        npo: npo / m,
        margin: margin / m,
        dlogits,
    }
}

/// NPO loss alone, averaged over `nodes`.
pub fn npo_loss(logits: &Array2<f64>, labels: &[usize], nodes: &[usize], ref_log_p: &[f64], beta: f64) -> f64 {
    let log_p = log_prob_of_label(logits, labels);
    nodes
        .iter()
        .zip(ref_log_p)
        .map(|(&i, &lr)| npo_term(log_p[i], lr, beta))
        .sum::<f64>()
        / nodes.len() as f64
}

/// `λ_m · mean max(0, τ_pre + m − CE)` over `nodes`.
pub fn mia_margin_loss(logits: &Array2<f64>, labels: &[usize], nodes: &[usize], tau_pre: f64, margin: f64, weight: f64) -> f64 {
    let log_p = log_prob_of_label(logits, labels);
    weight * nodes.iter().map(|&i| (tau_pre + margin + log_p[i]).max(0.0)).sum::<f64>() / nodes.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    /// `⟨Δ_u, Δ_r⟩` before correction.
    pub dot: f64,
    /// The conflicting component was removed.
    pub corrected: bool,
    /// `‖Δ_r‖ ≤ RETAIN_EPS`; `Δ_u` passed through.
    pub degenerate_retain: bool,
}

/// Removes the component of `du` that points against `dr`.
pub fn gradient_correct(du: &ParamVector, dr: &ParamVector) -> (ParamVector, Correction) {
    let nr = dr.norm_sq();
    let dot = du.dot(dr);
    if nr.sqrt() <= RETAIN_EPS {
        return (
            du.clone(),
            Correction {
                dot,
                corrected: false,
                degenerate_retain: true,
            },
        );
    }
    if dot >= 0.0 {
        return (
            du.clone(),
            Correction {
                dot,
                corrected: false,
                degenerate_retain: false,
            },
        );
    }
    let mut out = du.clone();
    out.axpy(-dot / nr, dr);
    (
        out,
        Correction {
            dot,
            corrected: true,
            degenerate_retain: false,
        },
    )
}

/// Clips `step` to norm `c_max`, applies it, and projects the result onto the
/// ball of radius `tau` around `theta0`. Returns the new iterate and the norm
/// of the clipped step.
pub fn clip_and_project(step: &ParamVector, theta: &ParamVector, theta0: &ParamVector, c_max: f64, tau: f64) -> (ParamVector, f64) {
    let norm = step.norm();
    let factor = if norm > c_max { c_max / norm } else { 1.0 };
    let mut next = theta.clone();
    next.axpy(factor, step);
    let drift = next.distance(theta0);
    if drift > tau {
        let shrink = tau / drift;
        for (v, &c) in next.as_mut_slice().iter_mut().zip(theta0.as_slice()) {
            *v = c + (*v - c) * shrink;
        }
    }
    (next, norm * factor)
}

#[derive(Debug, Clone)]
pub struct UnlearnState {
    pub shape: GcnShape,
    pub theta: ParamVector,
    pub theta0: ParamVector,
    pub target: usize,
    pub threshold: MiaThreshold,
    /// Target training nodes (local indices).
    nodes: Vec<usize>,
    /// `log p_θ0(y)` on `nodes`; the frozen NPO reference.
    ref_log_p: Vec<f64>,
}

impl UnlearnState {
    pub fn new(shape: GcnShape, theta0: ParamVector, target_shard: &ClientShard, threshold: MiaThreshold) -> Result<Self> {
        let nodes: Vec<usize> = target_shard
            .local
            .train_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if nodes.is_empty() {
            return Err(Error::EmptySplit("target train".into()));
        }
        let p0 = GcnParams::unflatten(shape, &theta0)?;
        let lp = log_prob_of_label(&gcn_logits(&p0, &target_shard.a_hat, &target_shard.local.features)?, &target_shard.local.labels);
        let ref_log_p = nodes.iter().map(|&i| lp[i]).collect();
        Ok(Self {
            shape,
            theta: theta0.clone(),
            theta0,
            target: target_shard.client_id,
            threshold,
            nodes,
            ref_log_p,
        })
    }

    pub fn drift(&self) -> f64 {
        self.theta.distance(&self.theta0)
    }

    pub fn target_nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Inference-mode mean cross-entropy on the target training nodes.
    pub fn target_ce(&self, shard: &ClientShard) -> Result<f64> {
        let p = GcnParams::unflatten(self.shape, &self.theta)?;
        let lp = log_prob_of_label(&gcn_logits(&p, &shard.a_hat, &shard.local.features)?, &shard.local.labels);
        Ok(-self.nodes.iter().map(|&i| lp[i]).sum::<f64>() / self.nodes.len() as f64)
    }
}

/// `−∇θ[NPO + margin]` on the target shard, with the forward dropout seeded
/// by `dropout_seed`.
pub fn unlearn_direction(
    state: &UnlearnState,
    shard: &ClientShard,
    cfg: &UnlearnConfig,
    dropout_seed: u64,
) -> Result<(ParamVector, ForgetLoss)> {
    let params = GcnParams::unflatten(state.shape, &state.theta)?;
    let dropout = Dropout {
        p: cfg.dropout,
        seed: dropout_seed,
    };
    let (logits, cache) = gcn_forward(&params, &shard.a_hat, &shard.local.features, Some(dropout))?;
    let loss = forget_loss(&logits, &shard.local.labels, &state.nodes, &state.ref_log_p, state.threshold.tau_pre(), cfg);
    let grad = backward_from_logits(&params, &shard.a_hat, &shard.local.features, &cache, &loss.dlogits).flatten();
    Ok((grad.scaled(-1.0), loss))
}

/// Weighted sum of one-epoch local displacements from `theta` over the
/// retained shards, with weights renormalized over those shards.
pub fn retain_direction(
    theta: &ParamVector,
    shape: GcnShape,
    retain: &[(&ClientShard, f64)],
    train: &TrainConfig,
    epoch: u64,
) -> Result<ParamVector> {
    if retain.is_empty() {
        return Err(Error::Validation("retain direction needs at least one retained client".into()));
    }
    let raw: Vec<f64> = retain.iter().map(|(_, w)| *w).collect();
    let weights = renormalize(&raw, &(0..raw.len()).collect::<Vec<_>>());
    let displacements: Vec<(usize, ParamVector)> = retain
        .par_iter()
        .map(|(shard, _)| {
            let upd = local_train(shard, shape, theta, train, epoch)?;
            Ok((shard.client_id, &upd.params - theta))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..retain.len()).collect();
    order.sort_by_key(|&k| displacements[k].0);
    let mut out = ParamVector::zeros(theta.len());
    for k in order {
        out.axpy(weights[k], &displacements[k].1);
    }
    Ok(out)
}

/// One line of the unlearning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRecord {
    pub epoch: usize,
    pub target_ce: f64,
    pub npo: f64,
    pub margin: f64,
    pub corrected: bool,
    pub dot_ur: f64,
    pub drift: f64,
    pub mia_rate: f64,
    /// Norm of the scaled step before clipping.
    pub raw_step_norm: f64,
    /// Norm of the step actually applied after clipping.
    pub step_norm: f64,
    pub degenerate_retain: bool,
    /// Test accuracy over the retained clients after the step.
    pub retain_acc: Option<f64>,
}

/// Training settings used to estimate the retain direction: one plain
/// gradient-descent epoch with the federation's step size and decay.
pub fn retain_train_config(local: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        optimizer: OptimizerKind::Sgd,
        seed: derive_seed(seed, &[stream::RETAIN]),
        ..local.clone()
    }
}

/// One unlearning epoch. `shards` must include the target; `weights` aligns
/// with `shards`.
pub fn unlearn_round(
    state: &mut UnlearnState,
    shards: &[ClientShard],
    weights: &[f64],
    cfg: &UnlearnConfig,
    retain_cfg: &TrainConfig,
    epoch: usize,
) -> Result<UnlearnRecord> {
    let target = find_shard(shards, state.target)?;
    let dropout_seed = derive_seed(cfg.seed, &[stream::UNLEARN, epoch as u64]);
    let (du, loss) = unlearn_direction(state, target, cfg, dropout_seed)?;
    let retain: Vec<(&ClientShard, f64)> = shards
        .iter()
        .zip(weights)
        .filter(|(s, _)| s.client_id != state.target)
        .map(|(s, &w)| (s, w))
        .collect();
    let (direction, correction) = if cfg.gradient_correction {
        let dr = retain_direction(&state.theta, state.shape, &retain, retain_cfg, epoch as u64)?;
        gradient_correct(&du, &dr)
    } else {
        (
            du.clone(),
            Correction {
                dot: f64::NAN,
                corrected: false,
                degenerate_retain: false,
            },
        )
    };
    let step = direction.scaled(cfg.lr * cfg.scale);
    let (next, step_norm) = clip_and_project(&step, &state.theta, &state.theta0, cfg.clip, cfg.drift_radius);
    if !next.is_finite() {
        return Err(Error::Validation(format!("unlearning produced non-finite parameters at epoch {epoch}")));
    }
    state.theta = next;

    let params = GcnParams::unflatten(state.shape, &state.theta)?;
    let members = shard_losses(&params, target, &state.nodes)?;
    let retain_acc = global_accuracy(&params, retain.iter().map(|(s, _)| *s), Split::Test).ok();
    Ok(UnlearnRecord {
        epoch,
        target_ce: members.iter().sum::<f64>() / members.len() as f64,
        npo: loss.npo,
        margin: loss.margin,
        corrected: correction.corrected,
        dot_ur: correction.dot,
        drift: state.drift(),
        mia_rate: mia_rate(&members, &state.threshold),
        raw_step_norm: step.norm(),
        step_norm,
        degenerate_retain: correction.degenerate_retain,
        retain_acc,
    })
}

/// Runs `cfg.epochs` unlearning epochs starting from the trained global.
pub fn run_unlearning(
    fed: &ServerState,
    target: usize,
    threshold: MiaThreshold,
    cfg: &UnlearnConfig,
    local: &TrainConfig,
) -> Result<(UnlearnState, Vec<UnlearnRecord>)> {
    let shard = find_shard(&fed.shards, target)?;
    let mut state = UnlearnState::new(fed.shape, fed.global.clone(), shard, threshold)?;
    let retain_cfg = retain_train_config(local, cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        log.push(unlearn_round(&mut state, &fed.shards, &fed.weights, cfg, &retain_cfg, epoch)?);
    }
    Ok((state, log))
}

pub fn write_log(log: &[UnlearnRecord], w: &mut impl Write) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
