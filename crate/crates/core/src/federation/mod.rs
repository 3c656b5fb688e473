//! FedAvg: aggregation weights, broadcast, local updates and weighted
//! aggregation over multiple rounds.

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ClientShard;
use crate::nn::{gcn_logits, predictions, local_train, GcnParams, GcnShape, ParamVector, TrainConfig};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    #[default]
    ByNodeCount,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    pub participation: f64,
    pub hidden: usize,
    pub local: TrainConfig,
    pub weight_rule: WeightRule,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            clients: 10,
            participation: 1.0,
            hidden: 64,
            local: TrainConfig::default(),
            weight_rule: WeightRule::ByNodeCount,
            seed: 2025,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::config(format!("{prefix}.clients"), "must be >= 2"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!("{prefix}.participation"), "must lie in (0, 1]"));
        }
        if self.hidden == 0 {
            return Err(Error::config(format!("{prefix}.hidden"), "must be >= 1"));
        }
        self.local.validate(&format!("{prefix}.local"))
    }
}

/// One round's evaluation of the broadcast global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub global_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub shape: GcnShape,
    pub global: ParamVector,
    /// Rounds completed.
    pub round: usize,
    pub shards: Vec<ClientShard>,
    /// Aggregation weights aligned with `shards`.
    pub weights: Vec<f64>,
    pub history: Vec<RoundRecord>,
    /// Per-client notices (e.g. clients that had no training nodes).
    pub warnings: Vec<String>,
}

impl ServerState {
    pub fn new(shards: Vec<ClientShard>, shape: GcnShape, global: ParamVector, rule: WeightRule) -> Result<Self> {
        let weights = compute_weights(&shards, rule)?;
        Ok(Self {
            shape,
            global,
            round: 0,
            shards,
            weights,
            history: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn global_params(&self) -> GcnParams {
        GcnParams::unflatten(self.shape, &self.global).expect("global vector matches shape")
    }
}

/// Aggregation weights: `n_i / Σ n_j` or `1 / K`.
pub fn compute_weights(shards: &[ClientShard], rule: WeightRule) -> Result<Vec<f64>> {
    let total: usize = shards.iter().map(ClientShard::num_nodes).sum();
    if shards.is_empty() || total == 0 {
        return Err(Error::Validation("need at least one non-empty shard".into()));
    }
    Ok(match rule {
        WeightRule::ByNodeCount => shards
            .iter()
            .map(|s| s.num_nodes() as f64 / total as f64)
            .collect(),
        WeightRule::Uniform => vec![1.0 / shards.len() as f64; shards.len()],
    })
}

/// Weighted mean of client vectors with weights renormalized over the given
/// clients. Terms are summed in ascending client-id order, so the result does
/// not depend on the order of `updates`.
pub fn aggregate(updates: &[(usize, f64, &ParamVector)]) -> ParamVector {
    assert!(!updates.is_empty(), "aggregate needs at least one update");
    let mut ordered: Vec<&(usize, f64, &ParamVector)> = updates.iter().collect();
    ordered.sort_by_key(|(id, _, _)| *id);
    let total: f64 = ordered.iter().map(|(_, w, _)| *w).sum();
    let mut out = ParamVector::zeros(ordered[0].2.len());
    for (_, w, v) in ordered {
        out.axpy(w / total, v);
    }
    out
}

/// Renormalizes `weights` over `subset` (indices into `weights`).
pub fn renormalize(weights: &[f64], subset: &[usize]) -> Vec<f64> {
    let total: f64 = subset.iter().map(|&i| weights[i]).sum();
    subset.iter().map(|&i| weights[i] / total).collect()
}

fn participants(num_clients: usize, participation: f64, seed: u64, round: usize) -> Vec<usize> {
    if participation >= 1.0 {
        return (0..num_clients).collect();
    }
    let count = ((participation * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    let mut rng = rng_for(seed, &[stream::PARTICIPATION, round as u64]);
    let mut chosen = sample(&mut rng, num_clients, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Split-wise accuracy of `params` over the given shards, micro-averaged.
pub fn split_accuracy(params: &GcnParams, shards: &[ClientShard]) -> Result<[Option<f64>; 3]> {
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for shard in shards {
        let logits = gcn_logits(params, &shard.a_hat, &shard.local.features)?;
        let pred = predictions(&logits);
        for i in 0..shard.num_nodes() {
            let correct = usize::from(pred[i] == shard.local.labels[i]);
            for (s, mask) in [&shard.local.train_mask, &shard.local.val_mask, &shard.local.test_mask]
                .into_iter()
                .enumerate()
            {
                if mask[i] {
                    hits[s] += correct;
                    totals[s] += 1;
                }
            }
        }
    }
    Ok(std::array::from_fn(|s| (totals[s] > 0).then(|| hits[s] as f64 / totals[s] as f64)))
}

/// One FedAvg round: broadcast, parallel local training, weighted aggregation
/// over participants, evaluation of the new global.
pub fn fed_round(state: &mut ServerState, cfg: &FedConfig) -> Result<()> {
    let chosen = participants(state.shards.len(), cfg.participation, cfg.seed, state.round);
    let broadcast = state.global.clone();
    let round = state.round as u64;
    let updates: Vec<_> = chosen
        .par_iter()
        .map(|&i| local_train(&state.shards[i], state.shape, &broadcast, &cfg.local, round))
        .collect::<Result<_>>()?;
    for (&i, u) in chosen.iter().zip(&updates) {
        if u.no_train_data {
            state.warnings.push(format!(
                "round {}: client {} has no training nodes; contributing the broadcast unchanged",
                state.round, state.shards[i].client_id
            ));
        }
    }
    let weights = renormalize(&state.weights, &chosen);
    let terms: Vec<(usize, f64, &ParamVector)> = chosen
        .iter()
        .zip(&weights)
        .zip(&updates)
        .map(|((&i, &w), u)| (state.shards[i].client_id, w, &u.params))
        .collect();
    state.global = aggregate(&terms);
    state.round += 1;
    let record = evaluate_round(state)?;
    state.history.push(record);
    Ok(())
}

fn evaluate_round(state: &ServerState) -> Result<RoundRecord> {
    let [train, val, test] = split_accuracy(&state.global_params(), &state.shards)?;
    Ok(RoundRecord {
        round: state.round,
        train_acc: train.unwrap_or(f64::NAN),
        val_acc: val.unwrap_or(f64::NAN),
        test_acc: test.unwrap_or(f64::NAN),
        global_norm: state.global.norm(),
    })
}

/// Glorot initialisation of the global model keyed by the federation seed.
pub fn init_global(shape: GcnShape, seed: u64) -> ParamVector {
    GcnParams::glorot(shape, &mut rng_for(seed, &[stream::INIT])).flatten()
}

/// Runs `cfg.rounds` FedAvg rounds over `shards` from a fresh initialisation.
pub fn run_federated(shards: Vec<ClientShard>, cfg: &FedConfig) -> Result<ServerState> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Validation("no shards to federate".into()))?;
    let shape = GcnShape::new(first.local.num_features(), cfg.hidden, first.local.num_classes);
    let init = init_global(shape, cfg.seed);
    run_federated_from(shards, cfg, init)
}

pub fn run_federated_from(shards: Vec<ClientShard>, cfg: &FedConfig, start: ParamVector) -> Result<ServerState> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Validation("no shards to federate".into()))?;
    let shape = GcnShape::new(first.local.num_features(), cfg.hidden, first.local.num_classes);
    let mut state = ServerState::new(shards, shape, start, cfg.weight_rule)?;
    for _ in 0..cfg.rounds {
        fed_round(&mut state, cfg)?;
    }
    Ok(state)
}

/// Writes one JSON object per round.
pub fn write_history(history: &[RoundRecord], w: &mut impl Write) -> Result<()> {
    for r in history {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
