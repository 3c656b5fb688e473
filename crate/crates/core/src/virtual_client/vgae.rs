//! Variational graph autoencoder with a two-layer GCN encoder and an
//! inner-product decoder, trained on Ã = A + I with 1:1 negative sampling.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{PropagationMatrix, SparseGraph};
use crate::nn::ParamVector;
use crate::seed::{rng_for, stream};

/// Encoder weights. Biases are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct VgaeParams {
    pub w0: Array2<f64>,
    pub w_mu: Array2<f64>,
    pub w_logvar: Array2<f64>,
}

impl VgaeParams {
    pub fn glorot(d: usize, hidden: usize, z_dim: usize, rng: &mut impl Rng) -> Self {
        let mut init = |r: usize, c: usize| {
            let limit = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-limit..limit))
        };
        Self {
            w0: init(d, hidden),
            w_mu: init(hidden, z_dim),
            w_logvar: init(hidden, z_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w0: Array2::zeros(self.w0.raw_dim()),
            w_mu: Array2::zeros(self.w_mu.raw_dim()),
            w_logvar: Array2::zeros(self.w_logvar.raw_dim()),
        }
    }

    pub fn z_dim(&self) -> usize {
        self.w_mu.ncols()
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector::from(
            self.w0
                .iter()
                .chain(self.w_mu.iter())
                .chain(self.w_logvar.iter())
                .copied()
                .collect::<Vec<_>>(),
        )
    }

    pub fn unflatten_like(&self, flat: &ParamVector) -> Result<Self> {
        let sizes = [self.w0.len(), self.w_mu.len(), self.w_logvar.len()];
        if flat.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Shape("VGAE parameter vector has the wrong length".into()));
        }
        let s = flat.as_slice();
        let take = |a: &Array2<f64>, from: usize| {
            Array2::from_shape_vec(a.raw_dim(), s[from..from + a.len()].to_vec()).expect("sized above")
        };
        Ok(Self {
            w0: take(&self.w0, 0),
            w_mu: take(&self.w_mu, sizes[0]),
            w_logvar: take(&self.w_logvar, sizes[0] + sizes[1]),
        })
    }
}

/// Encoder outputs for one forward pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    pre_hidden: Array2<f64>,
    /// `Â · ReLU(pre_hidden)`.
    propagated: Array2<f64>,
    /// `Â X`.
    ax: Array2<f64>,
}

pub fn encode(params: &VgaeParams, a_hat: &PropagationMatrix, x: &Array2<f64>) -> Result<Encoded> {
    if x.ncols() != params.w0.nrows() || x.nrows() != a_hat.n() {
        return Err(Error::Shape("VGAE input does not match encoder or propagation matrix".into()));
    }
    let ax = a_hat.matmul(x.view());
    let pre_hidden = ax.dot(&params.w0);
    let hidden = pre_hidden.mapv(|v| v.max(0.0));
    let propagated = a_hat.matmul(hidden.view());
    Ok(Encoded {
        mu: propagated.dot(&params.w_mu),
        logvar: propagated.dot(&params.w_logvar),
        pre_hidden,
        propagated,
        ax,
    })
}

/// Reparameterised sample `μ + exp(logvar/2) ⊙ ε`.
pub fn reparameterize(enc: &Encoded, eps: &Array2<f64>) -> Array2<f64> {
    let mut z = enc.logvar.mapv(|lv| (0.5 * lv).exp());
    z *= eps;
    z += &enc.mu;
    z
}

/// Reconstruction pairs with binary targets. Each unordered pair appears once.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
}

/// Positive entries of `A + I` (edges and self-loops) and an equal number of
/// uniformly sampled non-edges (fewer if the graph is nearly complete).
pub fn sample_pairs(graph: &SparseGraph, rng: &mut impl Rng) -> PairBatch {
    let n = graph.num_nodes();
    let mut pairs: Vec<(usize, usize)> = graph.edges().to_vec();
    pairs.extend((0..n).map(|i| (i, i)));
    let positives = pairs.len();
    let non_edges = n * (n - 1) / 2 - graph.num_edges();
    let wanted = positives.min(non_edges);
    let mut negatives = 0;
    let mut tries = 0;
    while negatives < wanted && tries < 50 * wanted.max(1) {
        tries += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j && !graph.has_edge(i, j) {
            pairs.push((i.min(j), i.max(j)));
            negatives += 1;
        }
    }
    let mut targets = vec![1.0; positives];
    targets.resize(pairs.len(), 0.0);
    PairBatch { pairs, targets }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VgaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
}

impl VgaeLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl
    }
}

/// `KL(q ‖ N(0, I))` summed over latent entries, scaled by `1/n²`.
pub fn kl_term(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let n = mu.nrows() as f64;
    let mut s = 0.0;
    Zip::from(mu).and(logvar).for_each(|&m, &lv| s += -0.5 * (1.0 + lv - m * m - lv.exp()));
    s / (n * n)
}

/// Loss and gradient for fixed noise `eps` and fixed pairs.
pub fn loss_and_grad(
    params: &VgaeParams,
    a_hat: &PropagationMatrix,
    x: &Array2<f64>,
    batch: &PairBatch,
    eps: &Array2<f64>,
) -> Result<(VgaeLoss, VgaeParams)> {
    let enc = encode(params, a_hat, x)?;
    let z = reparameterize(&enc, eps);
    let n = x.nrows() as f64;
    let count = batch.pairs.len().max(1) as f64;

    let mut rec = 0.0;
    let mut dz = Array2::<f64>::zeros(z.raw_dim());
    for (&(i, j), &y) in batch.pairs.iter().zip(&batch.targets) {
        let s = z.row(i).dot(&z.row(j));
        rec += softplus(s) - y * s;
        let g = (logistic(s) - y) / count;
        if i == j {
            let zi = z.row(i).to_owned();
            dz.row_mut(i).scaled_add(2.0 * g, &zi);
        } else {
            let (zi, zj) = (z.row(i).to_owned(), z.row(j).to_owned());
            dz.row_mut(i).scaled_add(g, &zj);
            dz.row_mut(j).scaled_add(g, &zi);
        }
    }
    rec /= count;
    let kl = kl_term(&enc.mu, &enc.logvar);

    let c = 1.0 / (n * n);
    let mut dmu = dz.clone();
    dmu.scaled_add(c, &enc.mu);
    let mut dlogvar = Array2::zeros(enc.logvar.raw_dim());
    Zip::from(&mut dlogvar)
        .and(&dz)
        .and(eps)
        .and(&enc.logvar)
        .for_each(|d, &g, &e, &lv| {
            let sigma = (0.5 * lv).exp();
            *d = g * e * 0.5 * sigma + c * 0.5 * (lv.exp() - 1.0);
        });

    let w_mu = enc.propagated.t().dot(&dmu);
    let w_logvar = enc.propagated.t().dot(&dlogvar);
    let d_prop = dmu.dot(&params.w_mu.t()) + dlogvar.dot(&params.w_logvar.t());
    let mut d_hidden = a_hat.matmul(d_prop.view());
    Zip::from(&mut d_hidden).and(&enc.pre_hidden).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let w0 = enc.ax.t().dot(&d_hidden);
    Ok((
        VgaeLoss { reconstruction: rec, kl },
        VgaeParams { w0, w_mu, w_logvar },
    ))
}

/// Loss only, for the same fixed noise and pairs.
pub fn loss(params: &VgaeParams, a_hat: &PropagationMatrix, x: &Array2<f64>, batch: &PairBatch, eps: &Array2<f64>) -> Result<VgaeLoss> {
    let enc = encode(params, a_hat, x)?;
    let z = reparameterize(&enc, eps);
    let count = batch.pairs.len().max(1) as f64;
    let rec = batch
        .pairs
        .iter()
        .zip(&batch.targets)
        .map(|(&(i, j), &y)| {
            let s = z.row(i).dot(&z.row(j));
            softplus(s) - y * s
        })
        .sum::<f64>()
        / count;
    Ok(VgaeLoss {
        reconstruction: rec,
        kl: kl_term(&enc.mu, &enc.logvar),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VgaeConfig {
    pub hidden: usize,
    pub z_dim: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for VgaeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            z_dim: 16,
            epochs: 200,
            lr: 1e-2,
        }
    }
}

/// A trained encoder plus one recorded latent sample.
#[derive(Debug, Clone)]
pub struct VgaeModel {
    pub params: VgaeParams,
    pub z: Array2<f64>,
    pub eps: Array2<f64>,
    pub seed: u64,
    /// Total loss per epoch, starting with the untrained model.
    pub losses: Vec<f64>,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Trains with Adam for `cfg.epochs` steps, resampling noise and negative
/// pairs every step.
pub fn vgae_train(
    graph: &SparseGraph,
    a_hat: &PropagationMatrix,
    x: &Array2<f64>,
    cfg: &VgaeConfig,
    seed: u64,
) -> Result<VgaeModel> {
    let n = graph.num_nodes();
    let mut rng = rng_for(seed, &[stream::VGAE]);
    let mut params = VgaeParams::glorot(x.ncols(), cfg.hidden, cfg.z_dim, &mut rng);
    let mut theta = params.flatten();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let (b1, b2, adam_eps) = (0.9f64, 0.999f64, 1e-8);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..=cfg.epochs {
        let batch = sample_pairs(graph, &mut rng);
        let eps = normal_matrix(n, cfg.z_dim, &mut rng);
        let (l, grad) = loss_and_grad(&params, a_hat, x, &batch, &eps)?;
        let total = l.total();
        if !total.is_finite() {
            return Err(Error::Divergence { epoch, loss: total });
        }
        losses.push(total);
        if epoch == cfg.epochs {
            break;
        }
        let g = grad.flatten();
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((w, &gi), mi), vi) in theta.as_mut_slice().iter_mut().zip(g.as_slice()).zip(&mut m).zip(&mut v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + adam_eps);
        }
        params = params.unflatten_like(&theta)?;
    }

    let enc = encode(&params, a_hat, x)?;
    let eps = normal_matrix(n, cfg.z_dim, &mut rng);
    let z = reparameterize(&enc, &eps);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: f64::NAN,
        });
    }
    Ok(VgaeModel {
        params,
        z,
        eps,
        seed,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalized_adjacency;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_posterior_has_zero_kl() {
        assert_eq!(kl_term(&Array2::zeros((4, 3)), &Array2::zeros((4, 3))), 0.0);
        assert!(kl_term(&Array2::ones((4, 3)), &Array2::zeros((4, 3))) > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = SparseGraph::from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let a = normalized_adjacency(&g);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.random::<f64>());
        let params = VgaeParams::glorot(4, 5, 3, &mut rng);
        let batch = sample_pairs(&g, &mut rng);
        let eps = normal_matrix(6, 3, &mut rng);
        let (_, grad) = loss_and_grad(&params, &a, &x, &batch, &eps).unwrap();
        let flat = params.flatten();
        let gflat = grad.flatten();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut p = flat.clone();
            p.0[k] += h;
            let mut q = flat.clone();
            q.0[k] -= h;
            let lp = loss(&params.unflatten_like(&p).unwrap(), &a, &x, &batch, &eps).unwrap().total();
            let lq = loss(&params.unflatten_like(&q).unwrap(), &a, &x, &batch, &eps).unwrap().total();
            let fd = (lp - lq) / (2.0 * h);
            let err = (fd - gflat.0[k]).abs() / fd.abs().max(gflat.0[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} analytic {}", gflat.0[k]);
        }
    }

    #[test]
    fn zero_epochs_records_initial_loss() {
        let g = SparseGraph::from_edges(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
        let a = normalized_adjacency(&g);
        let x = Array2::eye(5);
        let cfg = VgaeConfig {
            epochs: 0,
            ..VgaeConfig::default()
        };
        let m = vgae_train(&g, &a, &x, &cfg, 1).unwrap();
        assert_eq!(m.losses.len(), 1);
        assert_eq!(m.z.dim(), (5, 16));
    }

    #[test]
    fn training_lowers_loss() {
        let edges: Vec<(usize, usize)> = (0..20).flat_map(|i| [(i, (i + 1) % 20), (i, (i + 5) % 20)]).collect();
        let g = SparseGraph::from_edges(20, edges).unwrap();
        let a = normalized_adjacency(&g);
        let x = Array2::eye(20);
        let m = vgae_train(&g, &a, &x, &VgaeConfig::default(), 3).unwrap();
        let tail: f64 = m.losses[m.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < m.losses[0], "{tail} vs {}", m.losses[0]);
    }
}
