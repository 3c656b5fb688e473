//! Loss-threshold membership inference with a frozen threshold, global
//! accuracy over retained clients and the retrain-from-scratch baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{run_federated, FedConfig, ServerState};
use crate::graph::{ClientShard, PropagationMatrix};
use crate::nn::{gcn_logits, per_node_cross_entropy, predictions, GcnParams};
use ndarray::Array2;

/// Cross-entropy of one node under inference-mode logits.
pub fn sample_loss(params: &GcnParams, a_hat: &PropagationMatrix, x: &Array2<f64>, node: usize, y: usize) -> Result<f64> {
    if node >= x.nrows() {
        return Err(Error::Shape(format!("node {node} out of range for {} rows", x.nrows())));
    }
    let logits = gcn_logits(params, a_hat, x)?;
    let row = logits.slice(ndarray::s![node..node + 1, ..]).to_owned();
    Ok(per_node_cross_entropy(&row, &[y])[0])
}

/// Per-node losses of `shard` under `params`, restricted to `nodes`.
pub fn shard_losses(params: &GcnParams, shard: &ClientShard, nodes: &[usize]) -> Result<Vec<f64>> {
    let logits = gcn_logits(params, &shard.a_hat, &shard.local.features)?;
    let all = per_node_cross_entropy(&logits, &shard.local.labels);
    Ok(nodes.iter().map(|&i| all[i]).collect())
}

fn mask_nodes(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Member and non-member evaluation samples. Members are the target client's
/// training nodes; non-members are retained clients' test nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaSets {
    pub target_client: usize,
    /// Local node indices in the target shard.
    pub members: Vec<usize>,
    /// `(client_id, local node index)` pairs from retained shards.
    pub nonmembers: Vec<(usize, usize)>,
}

impl MiaSets {
    pub fn new(shards: &[ClientShard], target_client: usize) -> Result<Self> {
        let target = find_shard(shards, target_client)?;
        let members = mask_nodes(&target.local.train_mask);
        let nonmembers: Vec<(usize, usize)> = shards
            .iter()
            .filter(|s| s.client_id != target_client)
            .flat_map(|s| mask_nodes(&s.local.test_mask).into_iter().map(move |i| (s.client_id, i)))
            .collect();
        if members.is_empty() {
            return Err(Error::EmptySplit("target train (MIA members)".into()));
        }
        if nonmembers.is_empty() {
            return Err(Error::EmptySplit("retained test (MIA non-members)".into()));
        }
        Ok(Self {
            target_client,
            members,
            nonmembers,
        })
    }

    pub fn member_losses(&self, params: &GcnParams, shards: &[ClientShard]) -> Result<Vec<f64>> {
        shard_losses(params, find_shard(shards, self.target_client)?, &self.members)
    }

    pub fn nonmember_losses(&self, params: &GcnParams, shards: &[ClientShard]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.nonmembers.len());
        for shard in shards.iter().filter(|s| s.client_id != self.target_client) {
            let nodes: Vec<usize> = self
                .nonmembers
                .iter()
                .filter(|(c, _)| *c == shard.client_id)
                .map(|&(_, i)| i)
                .collect();
            if !nodes.is_empty() {
                out.extend(shard_losses(params, shard, &nodes)?);
            }
        }
        Ok(out)
    }
}

pub(crate) fn find_shard(shards: &[ClientShard], client_id: usize) -> Result<&ClientShard> {
    shards
        .iter()
        .find(|s| s.client_id == client_id)
        .ok_or_else(|| Error::Validation(format!("no client with id {client_id}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl LossSummary {
    fn of(losses: &[f64]) -> Self {
        Self {
            count: losses.len(),
            mean: losses.iter().sum::<f64>() / losses.len() as f64,
            min: losses.iter().copied().fold(f64::INFINITY, f64::min),
            max: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Every loss is identical; the threshold is that value.
    Degenerate,
    /// Best balanced accuracy below 0.6: the sets are barely distinguishable.
    WeakSeparation,
}

/// The frozen decision threshold. Fields are private so a fitted threshold
/// cannot be altered after the fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaThreshold {
    tau_pre: f64,
    balanced_accuracy: f64,
    separability: f64,
    members: LossSummary,
    nonmembers: LossSummary,
    flag: Option<FitFlag>,
}

impl MiaThreshold {
    pub fn tau_pre(&self) -> f64 {
        self.tau_pre
    }
    pub fn balanced_accuracy(&self) -> f64 {
        self.balanced_accuracy
    }
    /// `max(BA, 1 − BA)` maximised over candidate thresholds.
    pub fn separability(&self) -> f64 {
        self.separability
    }
    pub fn flag(&self) -> Option<FitFlag> {
        self.flag
    }
    pub fn member_summary(&self) -> LossSummary {
        self.members
    }
    pub fn nonmember_summary(&self) -> LossSummary {
        self.nonmembers
    }
}

/// Balanced accuracy of the rule "member iff loss < t".
pub fn balanced_accuracy(members: &[f64], nonmembers: &[f64], t: f64) -> f64 {
    let tpr = members.iter().filter(|&&l| l < t).count() as f64 / members.len() as f64;
    let tnr = nonmembers.iter().filter(|&&l| l >= t).count() as f64 / nonmembers.len() as f64;
    0.5 * (tpr + tnr)
}

/// Fits the threshold maximising balanced accuracy over midpoints of the
/// sorted distinct losses; ties go to the smaller threshold.
pub fn fit_threshold(members: &[f64], nonmembers: &[f64]) -> Result<MiaThreshold> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptySplit("MIA member or non-member set".into()));
    }
    if members.iter().chain(nonmembers).any(|l| !l.is_finite()) {
        return Err(Error::Validation("non-finite loss in MIA sets".into()));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&l| (l, true))
        .chain(nonmembers.iter().map(|&l| (l, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);

    // Sweep upward; after consuming every loss ≤ v, a threshold just above v
    // counts those members as positives and those non-members as errors.
    let mut best: Option<(f64, f64)> = None;
    let mut separability = 0.5_f64;
    let (mut below_m, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                below_m += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
        if i == all.len() {
            break;
        }
        let t = 0.5 * (v + all[i].0);
        let ba = 0.5 * (below_m as f64 / nm + (nn - below_n as f64) / nn);
        separability = separability.max(ba.max(1.0 - ba));
        if best.is_none_or(|(_, b)| ba > b) {
            best = Some((t, ba));
        }
    }

    let (tau_pre, ba, flag) = match best {
        None => (all[0].0, 0.5, Some(FitFlag::Degenerate)),
        Some((t, ba)) => (t, ba, (ba < 0.6).then_some(FitFlag::WeakSeparation)),
    };
    Ok(MiaThreshold {
        tau_pre,
        balanced_accuracy: ba,
        separability,
        members: LossSummary::of(members),
        nonmembers: LossSummary::of(nonmembers),
        flag,
    })
}

/// Fraction of member losses strictly below the frozen threshold.
pub fn mia_rate(member_losses: &[f64], thr: &MiaThreshold) -> f64 {
    if member_losses.is_empty() {
        return 0.0;
    }
    member_losses.iter().filter(|&&l| l < thr.tau_pre).count() as f64 / member_losses.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn mask(self, shard: &ClientShard) -> &[bool] {
        match self {
            Split::Train => &shard.local.train_mask,
            Split::Val => &shard.local.val_mask,
            Split::Test => &shard.local.test_mask,
        }
    }
}

/// Micro-averaged accuracy over the split nodes of `shards`.
pub fn global_accuracy<'a>(
    params: &GcnParams,
    shards: impl IntoIterator<Item = &'a ClientShard>,
    split: Split,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for shard in shards {
        let mask = split.mask(shard);
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let pred = predictions(&gcn_logits(params, &shard.a_hat, &shard.local.features)?);
        for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            total += 1;
            hits += usize::from(pred[i] == shard.local.labels[i]);
        }
    }
    if total == 0 {
        return Err(Error::EmptySplit(format!("{split:?}").to_lowercase()));
    }
    Ok(hits as f64 / total as f64)
}

/// Fresh FedAvg over every shard except `exclude`.
pub fn retrain_oracle(shards: &[ClientShard], cfg: &FedConfig, exclude: usize) -> Result<ServerState> {
    let retained: Vec<ClientShard> = shards.iter().filter(|s| s.client_id != exclude).cloned().collect();
    if retained.is_empty() {
        return Err(Error::Validation("retrain oracle needs at least one retained client".into()));
    }
    run_federated(retained, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, SparseGraph};
    use crate::nn::{masked_cross_entropy, GcnShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_seven_classes() {
        let g = SparseGraph::empty(3).unwrap();
        let p = GcnParams::zeros(GcnShape::new(2, 2, 7));
        let l = sample_loss(&p, &normalized_adjacency(&g), &Array2::ones((3, 2)), 1, 4).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((l - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn sample_loss_matches_singleton_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = SparseGraph::from_edges(5, [(0, 1), (1, 2), (3, 4), (0, 4)]).unwrap();
        let a = normalized_adjacency(&g);
        let p = GcnParams::glorot(GcnShape::new(3, 4, 3), &mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
        let labels = [0, 2, 1, 1, 0];
        let logits = gcn_logits(&p, &a, &x).unwrap();
        for node in 0..5 {
            let mut mask = [false; 5];
            mask[node] = true;
            let expected = masked_cross_entropy(&logits, &labels, &mask).unwrap();
            let got = sample_loss(&p, &a, &x, node, labels[node]).unwrap();
            assert!((got - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn separated_sets_fit_midpoint() {
        let thr = fit_threshold(&[0.1, 0.2], &[1.0, 1.2]).unwrap();
        assert!((thr.tau_pre() - 0.6).abs() < 1e-15);
        assert_eq!(thr.balanced_accuracy(), 1.0);
        assert_eq!(thr.flag(), None);
    }

    #[test]
    fn degenerate_sets_flagged() {
        let thr = fit_threshold(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(thr.flag(), Some(FitFlag::Degenerate));
        assert_eq!(thr.tau_pre(), 0.5);
    }

    #[test]
    fn identical_distributions_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..400).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..400).map(|_| rng.random()).collect();
        let thr = fit_threshold(&a, &b).unwrap();
        assert!((thr.balanced_accuracy() - 0.5).abs() < 0.1);
        assert_eq!(thr.flag(), Some(FitFlag::WeakSeparation));
    }

    #[test]
    fn rate_counting() {
        let thr = fit_threshold(&[0.1, 0.2], &[1.0, 1.2]).unwrap();
        let losses = [0.0, 0.5, 0.59, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(mia_rate(&losses, &thr), 0.375);
        assert_eq!(mia_rate(&[0.7, 2.0], &thr), 0.0);
        assert_eq!(mia_rate(&[0.0, 0.1], &thr), 1.0);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let thr = fit_threshold(&[0.123456789, 0.2], &[1.0 / 3.0, 1.2]).unwrap();
        let back: MiaThreshold = serde_json::from_str(&serde_json::to_string(&thr).unwrap()).unwrap();
        assert_eq!(back.tau_pre().to_bits(), thr.tau_pre().to_bits());
        assert_eq!(back, thr);
    }
}
