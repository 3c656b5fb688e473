//! Synthetic replacement shard for a departed client.
//!
//! Generation runs on the departing client: spectral profile of its subgraph,
//! VGAE latents projected onto the low-frequency eigenvectors, thresholded
//! inner-product decoding and Gaussian features from per-feature statistics.
//! Only a [`VirtualUpload`] leaves the client; the server labels it with the
//! pre-unlearning model and hosts it as an ordinary shard.

mod vgae;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use vgae::{
    encode, kl_term, loss as vgae_loss, loss_and_grad as vgae_loss_and_grad, reparameterize, sample_pairs, vgae_train,
    Encoded, PairBatch, VgaeConfig, VgaeLoss, VgaeModel, VgaeParams,
};

use crate::error::{Error, Result};
use crate::federation::{fed_round, FedConfig, ServerState};
use crate::graph::{
    normalized_adjacency, normalized_laplacian_sparse, smallest_eigenpairs, ClientShard, Dataset, DatasetFile,
    IsolatedNodePolicy, SparseGraph, SpectralProfile,
};
use crate::nn::{gcn_logits, predictions, GcnParams, ParamVector};
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualConfig {
    /// Spectral dimension; `None` means `min(32, n − 1)`.
    pub k: Option<usize>,
    pub gamma: f64,
    /// Replace `gamma` by the threshold whose edge count best matches the
    /// departed shard.
    pub match_edge_count: bool,
    pub sigma_x: f64,
    pub vgae: VgaeConfig,
    pub repair_rounds: usize,
    pub seed: u64,
}

impl Default for VirtualConfig {
    fn default() -> Self {
        Self {
            k: None,
            gamma: 0.7,
            match_edge_count: false,
            sigma_x: 0.1,
            vgae: VgaeConfig::default(),
            repair_rounds: 5,
            seed: 2025,
        }
    }
}

impl VirtualConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(key("gamma"), "must lie in (0, 1)"));
        }
        if self.k == Some(0) {
            return Err(Error::config(key("k"), "must be >= 1"));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return Err(Error::config(key("sigma_x"), "must be >= 0"));
        }
        if self.vgae.hidden == 0 || self.vgae.z_dim == 0 {
            return Err(Error::config(key("vgae"), "hidden and z_dim must be >= 1"));
        }
        if !(self.vgae.lr > 0.0 && self.vgae.lr.is_finite()) {
            return Err(Error::config(key("vgae.lr"), "must be > 0"));
        }
        Ok(())
    }

    pub fn spectral_dim(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| 32.min(n.saturating_sub(1))).clamp(1, n.max(1))
    }
}

/// The `k` smallest eigenpairs of the graph's normalized Laplacian.
pub fn extract_spectral_profile(graph: &SparseGraph, k: usize) -> Result<SpectralProfile> {
    if k > graph.num_nodes() {
        return Err(Error::Validation(format!(
            "spectral dimension {k} exceeds shard size {}",
            graph.num_nodes()
        )));
    }
    let l = normalized_laplacian_sparse(graph, IsolatedNodePolicy::ZeroDegreeInverse)?;
    smallest_eigenpairs(&l, k)
}

/// `U Uᵀ Z`.
pub fn project_latent(z: &Array2<f64>, u: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if z.nrows() != u.nrows() {
        return Err(Error::Shape(format!(
            "latent has {} rows, basis has {}",
            z.nrows(),
            u.nrows()
        )));
    }
    Ok(u.dot(&u.t().dot(z)))
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `logistic(Z Zᵀ)` over the strict upper triangle, row-major.
fn upper_probabilities(z: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let gram = z.dot(&z.t());
    let n = z.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j, logistic(gram[[i, j]])));
        }
    }
    out
}

/// Edges wherever `logistic(z_i · z_j) > γ`, `i ≠ j`.
pub fn decode_adjacency(z_proj: &Array2<f64>, gamma: f64) -> Result<SparseGraph> {
    let edges = upper_probabilities(z_proj)
        .into_iter()
        .filter(|&(_, _, p)| p > gamma)
        .map(|(i, j, _)| (i, j));
    SparseGraph::from_edges(z_proj.nrows(), edges)
}

/// Bisects γ over (0, 1) for the decoded edge count closest to `target`.
pub fn match_threshold(z_proj: &Array2<f64>, target: usize) -> f64 {
    let probs: Vec<f64> = upper_probabilities(z_proj).into_iter().map(|(_, _, p)| p).collect();
    let count = |g: f64| probs.iter().filter(|&&p| p > g).count();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = (0.5, count(0.5).abs_diff(target));
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let c = count(mid);
        if c.abs_diff(target) < best.1 {
            best = (mid, c.abs_diff(target));
        }
        if c > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best.0
}

/// Per-feature mean and standard deviation of a shard's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_x: f64,
}

impl FeatureStats {
    pub fn from_features(x: &Array2<f64>, sigma_x: f64) -> Self {
        let mu = x.mean_axis(Axis(0)).map_or_else(|| vec![0.0; x.ncols()], |m| m.to_vec());
        let sigma = x.std_axis(Axis(0), 0.0).to_vec();
        Self { mu, sigma, sigma_x }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Rows i.i.d. from `N(μ, diag(σ² + σ_x²))`.
pub fn synthesize_features(stats: &FeatureStats, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, &[stream::FEATURES]);
    let std: Vec<f64> = stats.sigma.iter().map(|s| (s * s + stats.sigma_x * stats.sigma_x).sqrt()).collect();
    let d = stats.dim();
    Array2::from_shape_fn((n, d), |(_, f)| {
        let e: f64 = rng.sample(StandardNormal);
        stats.mu[f] + std[f] * e
    })
}

/// Synthesized features with every row that coincides exactly with a row of
/// `original` redrawn. Returns the matrix and the number of redraws.
fn synthesize_distinct(stats: &FeatureStats, n: usize, seed: u64, original: &Array2<f64>) -> (Array2<f64>, usize) {
    let mut x = synthesize_features(stats, n, seed);
    let mut redraws = 0;
    for i in 0..n {
        let mut attempt = 0u64;
        while original.rows().into_iter().any(|r| r == x.row(i)) {
            attempt += 1;
            redraws += 1;
            let fresh = synthesize_features(stats, 1, derive_seed(seed, &[i as u64, attempt]));
            x.row_mut(i).assign(&fresh.row(0));
            // A degenerate distribution can only reproduce rows; stop trying.
            if attempt > 8 {
                break;
            }
        }
    }
    (x, redraws)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub vgae: u64,
    pub features: u64,
}

/// Everything needed to replay a synthetic shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub k: usize,
    pub gamma: f64,
    pub sigma_x: f64,
    pub seeds: Seeds,
    pub vgae: VgaeConfig,
    pub vgae_final_loss: f64,
    pub source_eigenvalues: Vec<f64>,
    pub source_edges: usize,
}

/// Synthetic structure and features.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGraph {
    pub graph: SparseGraph,
    pub features: Array2<f64>,
    pub provenance: Provenance,
}

/// What the departing client hands to the server. It carries no raw rows or
/// edges of the departed shard.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualUpload {
    pub synth: SynthGraph,
    pub stats: FeatureStats,
}

/// Client-side generation from the departing shard.
pub fn generate_upload(shard: &ClientShard, cfg: &VirtualConfig) -> Result<VirtualUpload> {
    let n = shard.num_nodes();
    if n < 2 {
        return Err(Error::Validation("virtual client needs a shard of at least two nodes".into()));
    }
    let k = cfg.spectral_dim(n);
    let profile = extract_spectral_profile(&shard.local.graph, k)?;
    let vgae_seed = derive_seed(cfg.seed, &[stream::VGAE, shard.client_id as u64]);
    let model = vgae_train(&shard.local.graph, &shard.a_hat, &shard.local.features, &cfg.vgae, vgae_seed)?;
    let z_proj = project_latent(&model.z, profile.eigenvectors.view())?;
    let gamma = if cfg.match_edge_count {
        match_threshold(&z_proj, shard.local.graph.num_edges())
    } else {
        cfg.gamma
    };
    let graph = decode_adjacency(&z_proj, gamma)?;

    let stats = FeatureStats::from_features(&shard.local.features, cfg.sigma_x);
    let feature_seed = derive_seed(cfg.seed, &[stream::FEATURES, shard.client_id as u64]);
    let (features, _) = synthesize_distinct(&stats, n, feature_seed, &shard.local.features);

    Ok(VirtualUpload {
        synth: SynthGraph {
            graph,
            features,
            provenance: Provenance {
                k,
                gamma,
                sigma_x: cfg.sigma_x,
                seeds: Seeds {
                    vgae: vgae_seed,
                    features: feature_seed,
                },
                vgae: cfg.vgae.clone(),
                vgae_final_loss: *model.losses.last().expect("at least the initial loss"),
                source_eigenvalues: profile.eigenvalues,
                source_edges: shard.local.graph.num_edges(),
            },
        },
        stats,
    })
}

/// Server-side hosting: pseudo-labels from `theta0`, every node in training.
pub fn host_virtual(upload: &VirtualUpload, theta0: &GcnParams, client_id: usize) -> Result<ClientShard> {
    let synth = &upload.synth;
    let n = synth.graph.num_nodes();
    let a_hat = normalized_adjacency(&synth.graph);
    let labels = predictions(&gcn_logits(theta0, &a_hat, &synth.features)?);
    let local = Dataset {
        graph: synth.graph.clone(),
        features: synth.features.clone(),
        labels,
        num_classes: theta0.shape().c,
        train_mask: vec![true; n],
        val_mask: vec![false; n],
        test_mask: vec![false; n],
    };
    local.check_shapes()?;
    Ok(ClientShard {
        client_id,
        global_ids: Vec::new(),
        local,
        a_hat,
    })
}

/// Generates and hosts the virtual replacement for `shard`. The virtual shard
/// keeps the departed client's id.
pub fn build_virtual_client(shard: &ClientShard, cfg: &VirtualConfig, theta0: &GcnParams) -> Result<(ClientShard, VirtualUpload)> {
    let upload = generate_upload(shard, cfg)?;
    let hosted = host_virtual(&upload, theta0, shard.client_id)?;
    Ok((hosted, upload))
}

/// `rounds` FedAvg rounds over `retained ∪ {virtual}` from `theta_u`. Round
/// numbering (and so the per-client random streams) continues at
/// `first_round`.
pub fn run_repair(
    retained: Vec<ClientShard>,
    virtual_shard: Option<ClientShard>,
    theta_u: ParamVector,
    cfg: &FedConfig,
    first_round: usize,
    rounds: usize,
) -> Result<ServerState> {
    let first = retained
        .first()
        .ok_or_else(|| Error::Validation("repair needs at least one retained client".into()))?;
    let shape = crate::nn::GcnShape::new(first.local.num_features(), cfg.hidden, first.local.num_classes);
    let mut shards = retained;
    shards.extend(virtual_shard);
    shards.sort_by_key(|s| s.client_id);
    let mut state = ServerState::new(shards, shape, theta_u, cfg.weight_rule)?;
    state.round = first_round;
    for _ in 0..rounds {
        fed_round(&mut state, cfg)?;
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct VirtualFile {
    #[serde(flatten)]
    dataset: DatasetFile,
    provenance: Provenance,
}

/// Writes a hosted virtual shard in the dataset JSON layout plus provenance.
pub fn save_virtual(shard: &ClientShard, provenance: &Provenance, path: impl AsRef<Path>) -> Result<()> {
    let file = VirtualFile {
        dataset: shard.local.to_file(),
        provenance: provenance.clone(),
    };
    serde_json::to_writer(BufWriter::new(File::create(path)?), &file)?;
    Ok(())
}

pub fn load_virtual(path: impl AsRef<Path>) -> Result<(Dataset, Provenance)> {
    let path = path.as_ref();
    let file: VirtualFile = serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((file.dataset.into_dataset_unchecked()?, file.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::projector;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_edge_and_two_components() {
        let p = extract_spectral_profile(&SparseGraph::from_edges(2, [(0, 1)]).unwrap(), 1).unwrap();
        assert!(p.eigenvalues[0].abs() < 1e-12);
        let p = extract_spectral_profile(&SparseGraph::from_edges(4, [(0, 1), (2, 3)]).unwrap(), 2).unwrap();
        assert!(p.eigenvalues.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_simple_fn((5, 3), || rng.random::<f64>());
        let full = project_latent(&z, Array2::<f64>::eye(5).view()).unwrap();
        assert!(full.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let u = array![[1.0], [0.0], [0.0]];
        let orth = array![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]];
        assert!(project_latent(&orth, u.view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(project_latent(&orth, Array2::<f64>::eye(2).view()).is_err());

        let p = projector(u.view());
        assert_eq!(p.dot(&p), p);
    }

    #[test]
    fn decoding_thresholds() {
        let zero = Array2::<f64>::zeros((4, 2));
        assert_eq!(decode_adjacency(&zero, 0.7).unwrap().num_edges(), 0);
        assert_eq!(decode_adjacency(&zero, 0.4).unwrap().num_edges(), 6);
        // Rows (1, 1): z·z = 2, logistic(2) ≈ 0.881 > 0.7.
        let z = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(decode_adjacency(&z, 0.7).unwrap().has_edge(0, 1));
        assert!((logistic(2.0) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn edge_count_non_increasing_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array2::from_shape_simple_fn((12, 3), || rng.random::<f64>() - 0.3);
        let mut prev = usize::MAX;
        for g in [0.01, 0.2, 0.5, 0.6, 0.7, 0.8, 0.95, 0.999] {
            let e = decode_adjacency(&z, g).unwrap().num_edges();
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn feature_synthesis() {
        let stats = FeatureStats {
            mu: vec![1.0, -2.0],
            sigma: vec![0.0, 0.0],
            sigma_x: 0.0,
        };
        let x = synthesize_features(&stats, 3, 5);
        assert!(x.rows().into_iter().all(|r| r.to_vec() == vec![1.0, -2.0]));

        let stats = FeatureStats {
            mu: vec![0.0],
            sigma: vec![1.0],
            sigma_x: 0.1,
        };
        let x = synthesize_features(&stats, 10_000, 5);
        let mean = x.mean().unwrap();
        let std = x.std(0.0);
        assert!(mean.abs() < 0.05);
        assert!((std - (1.0f64 + 0.01).sqrt()).abs() < 0.05);
        assert_eq!(x, synthesize_features(&stats, 10_000, 5));
    }

    #[test]
    fn stats_match_columns() {
        let x = array![[1.0, 0.0], [3.0, 0.0]];
        let s = FeatureStats::from_features(&x, 0.1);
        assert_eq!(s.mu, vec![2.0, 0.0]);
        assert_eq!(s.sigma, vec![1.0, 0.0]);
    }
}
