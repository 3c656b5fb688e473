//! Acceptance criteria, one pass/fail line each.
//!
//! Criteria 7–12 need the Cora citation graph in canonical dataset JSON,
//! read from `FEDGCV_CORA` or `data/cora.json` under the workspace root.
//! Without it they report FAIL with the reason. Only failures of criteria
//! that actually ran make the process exit non-zero, unless `FEDGCV_STRICT`
//! is set, in which case every FAIL does.

use std::path::PathBuf;
use std::time::Instant;

use fedgcv_core::evaluation::{balanced_accuracy, fit_threshold, retrain_oracle};
use fedgcv_core::experiment::{run_pipeline_with, Context, ExperimentConfig, Phase, ResultsReport, RunOptions, SweepSpec};
use fedgcv_core::federation::{aggregate, run_federated, FedConfig};
use fedgcv_core::graph::{
    induce_shards, normalized_adjacency, normalized_laplacian, normalized_laplacian_sparse, partition_graph, projector,
    smallest_eigenpairs, smallest_eigenpairs_with, EigenOptions, IsolatedNodePolicy, SparseGraph,
};
use fedgcv_core::nn::{gcn_backward, gcn_forward, masked_cross_entropy, weight_penalty, Dropout, GcnParams, GcnShape, ParamVector};
use fedgcv_core::synthetic::{generate, SyntheticSpec};
use fedgcv_core::unlearning::{clip_and_project, gradient_correct};
use fedgcv_core::virtual_client::{vgae_loss, vgae_loss_and_grad, PairBatch, VgaeParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(PartialEq)]
enum Outcome {
    Pass,
    Fail,
    /// Could not run; counts as FAIL in the report.
    Unavailable,
}

struct Verdict {
    outcome: Outcome,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    Verdict {
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail,
    }
}

fn randn(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_vec(rng: &mut impl Rng, n: usize) -> ParamVector {
    ParamVector::from((0..n).map(|_| randn(rng)).collect::<Vec<_>>())
}

// ---------------------------------------------------------------- 1

fn gradient_correction_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::NEG_INFINITY;
    let mut passthrough_ok = true;
    let mut fired = 0;
    for i in 0..1000 {
        let dim = (4.0 * (2500.0f64).powf(rng.random::<f64>())).round() as usize;
        let du = random_vec(&mut rng, dim);
        let mut dr = random_vec(&mut rng, dim);
        // Every third pair is forced into conflict.
        if i % 3 == 0 && du.dot(&dr) > 0.0 {
            dr.scale(-1.0);
        }
        let (hat, c) = gradient_correct(&du, &dr);
        let dot = du.dot(&dr);
        if dot >= 0.0 {
            passthrough_ok &= hat.as_slice().iter().zip(du.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        } else {
            fired += 1;
            assert!(c.corrected);
        }
        let scale = hat.norm() * dr.norm();
        if scale > 0.0 {
            worst = worst.max(-hat.dot(&dr) / scale);
        }
    }
    let v = |x: &[f64]| ParamVector::from(x.to_vec());
    let close = |a: &ParamVector, b: &[f64]| a.as_slice().iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    let orth = gradient_correct(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 3.0, 0.0])).0;
    let anti = gradient_correct(&v(&[1.5, -2.0, 0.5]), &v(&[-1.5, 2.0, -0.5])).0;
    let hand = gradient_correct(&v(&[1.0, -1.0]), &v(&[0.0, 2.0])).0;
    let analytic = close(&orth, &[1.0, 0.0, 0.0]) && close(&anti, &[0.0, 0.0, 0.0]) && close(&hand, &[1.0, 0.0]);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && passthrough_ok && analytic && secs < 5.0,
        format!(
            "worst -<u,r>/(|u||r|) = {worst:.2e}, {fired} corrected, pass-through bit-exact: {passthrough_ok}, analytic: {analytic}, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> SparseGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    SparseGraph::from_edges(n, edges).unwrap()
}

/// Max over coordinates of |a − f| / max(|a|, |f|, 1e-6).
fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn central_diff(theta: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            t[k] = theta[k] + eps;
            let up = f(&t);
            t[k] = theta[k] - eps;
            let down = f(&t);
            t[k] = theta[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Smallest |pre-activation|; central differences are only valid away from
/// the ReLU kink.
fn kink_margin(pre: &Array2<f64>) -> f64 {
    pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn gcn_instance(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let n = rng.random_range(2..=8);
        let (d, h, c) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(2..=4));
        let g = random_graph(rng, n, 0.4);
        let a = normalized_adjacency(&g);
        let x = Array2::from_shape_simple_fn((n, d), || randn(rng));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let shape = GcnShape::new(d, h, c);
        let params = GcnParams::glorot(shape, rng);
        let dropout = rng.random_bool(0.5).then(|| Dropout { p: 0.3, seed: rng.random() });
        let wd = if rng.random_bool(0.5) { 5e-4 } else { 0.0 };
        let (logits, cache) = gcn_forward(&params, &a, &x, dropout).unwrap();
        let pre = a.matmul(x.dot(&params.w1).view()) + &params.b1;
        if kink_margin(&pre) < 1e-3 {
            continue;
        }
        let analytic = gcn_backward(&params, &a, &x, &cache, &logits, &labels, &mask, wd).unwrap();
        let objective = |t: &[f64]| {
            let p = GcnParams::unflatten(shape, &ParamVector::from(t.to_vec())).unwrap();
            let (l, _) = gcn_forward(&p, &a, &x, dropout).unwrap();
            masked_cross_entropy(&l, &labels, &mask).unwrap() + weight_penalty(&p, wd)
        };
        let fd = central_diff(params.flatten().as_slice(), 1e-5, objective);
        return rel_err(analytic.as_slice(), &fd);
    }
}

fn vgae_instance(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let n = rng.random_range(2..=8);
        let (d, h, z) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(1..=4));
        let g = random_graph(rng, n, 0.4);
        let a = normalized_adjacency(&g);
        let x = Array2::from_shape_simple_fn((n, d), || randn(rng));
        let params = VgaeParams::glorot(d, h, z, rng);
        let pre = a.matmul(x.view()).dot(&params.w0);
        if kink_margin(&pre) < 1e-3 {
            continue;
        }
        let pairs: Vec<(usize, usize)> = (0..2 * n)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let targets = pairs.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let batch = PairBatch { pairs, targets };
        let eps = Array2::from_shape_simple_fn((n, z), || randn(rng));
        let (_, grad) = vgae_loss_and_grad(&params, &a, &x, &batch, &eps).unwrap();
        let objective = |t: &[f64]| {
            let p = params.unflatten_like(&ParamVector::from(t.to_vec())).unwrap();
            vgae_loss(&p, &a, &x, &batch, &eps).unwrap().total()
        };
        let fd = central_diff(params.flatten().as_slice(), 1e-5, objective);
        return rel_err(grad.flatten().as_slice(), &fd);
    }
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gcn = (0..25).map(|_| gcn_instance(&mut rng)).fold(0.0, f64::max);
    let vgae = (0..25).map(|_| vgae_instance(&mut rng)).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        gcn <= 1e-4 && vgae <= 1e-4 && secs < 30.0,
        format!("25 instances each, max rel. error GCN {gcn:.2e}, VGAE {vgae:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 3

/// Householder reduction of a symmetric matrix to tridiagonal form.
fn tridiagonalize(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    for k in 0..n.saturating_sub(2) {
        let x: Vec<f64> = (k + 1..n).map(|i| a[i][k]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.clone();
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vn == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vn);
        let m = n - k - 1;
        // A' = H A H on the trailing block, H = I − 2 v vᵀ.
        let p: Vec<f64> = (0..m).map(|i| (0..m).map(|j| a[k + 1 + i][k + 1 + j] * v[j]).sum()).collect();
        let kk: f64 = (0..m).map(|i| v[i] * p[i]).sum();
        let q: Vec<f64> = (0..m).map(|i| p[i] - kk * v[i]).collect();
        for i in 0..m {
            for j in 0..m {
                a[k + 1 + i][k + 1 + j] -= 2.0 * (v[i] * q[j] + q[i] * v[j]);
            }
        }
        a[k + 1][k] = alpha;
        a[k][k + 1] = alpha;
        for i in k + 2..n {
            a[i][k] = 0.0;
            a[k][i] = 0.0;
        }
    }
    let diag = (0..n).map(|i| a[i][i]).collect();
    let off = (0..n.saturating_sub(1)).map(|i| a[i + 1][i]).collect();
    (diag, off)
}

/// Number of eigenvalues strictly below `x` (Sturm sequence).
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..diag.len() {
        let e2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        q = diag[i] - x - if i == 0 { 0.0 } else { e2 / q };
        if q == 0.0 {
            q = -f64::EPSILON * (diag[i].abs() + x.abs() + 1.0);
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

fn oracle_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let rows = (0..n).map(|i| a.row(i).to_vec()).collect();
    let (diag, off) = tridiagonalize(rows);
    let radius = (0..n)
        .map(|i| {
            diag[i].abs() + if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 }
        })
        .fold(0.0, f64::max)
        + 1.0;
    (0..n)
        .map(|k| {
            let (mut lo, mut hi) = (-radius, radius);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if sturm_count(&diag, &off, mid) > k {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-15 * radius {
                    break;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

fn spectral_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_dense = 0.0f64;
    for n in 1..=50 {
        for _ in 0..3 {
            let mut a = Array2::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
            a = &a + &a.t();
            let got = smallest_eigenpairs(&a, n).unwrap().eigenvalues;
            let want = oracle_eigenvalues(&a);
            worst_dense = got.iter().zip(&want).fold(worst_dense, |m, (g, w)| m.max((g - w).abs()));
        }
    }

    // Laplacians, through both the dense and the Lanczos paths.
    let mut worst_lap = 0.0f64;
    let mut out_of_range = 0.0f64;
    let mut worst_projector = 0.0f64;
    let lanczos = EigenOptions {
        dense_cutoff: 0,
        ..EigenOptions::default()
    };
    for _ in 0..40 {
        let n = rng.random_range(2..=50);
        let density = rng.random_range(0.05..0.5);
        let g = random_graph(&mut rng, n, density);
        let dense = normalized_laplacian(&g, IsolatedNodePolicy::ZeroDegreeInverse).unwrap();
        let want = oracle_eigenvalues(&dense);
        let full = smallest_eigenpairs(&dense, n).unwrap().eigenvalues;
        for (&g, &w) in full.iter().zip(&want) {
            worst_lap = worst_lap.max((g - w).abs());
            out_of_range = out_of_range.max(-g).max(g - 2.0);
        }
        let k = rng.random_range(1..=n.min(8));
        let sparse = normalized_laplacian_sparse(&g, IsolatedNodePolicy::ZeroDegreeInverse).unwrap();
        let prof = smallest_eigenpairs_with(&sparse, k, &lanczos).unwrap();
        for (&g, &w) in prof.eigenvalues.iter().zip(&want) {
            worst_lap = worst_lap.max((g - w).abs());
        }
        let p = projector(prof.eigenvectors.view());
        let p2 = p.dot(&p);
        worst_projector = worst_projector.max((&p2 - &p).iter().fold(0.0, |m, v| m.max(v.abs())));
    }

    let edge = SparseGraph::from_edges(2, [(0, 1)]).unwrap();
    let l = normalized_laplacian(&edge, IsolatedNodePolicy::Reject).unwrap();
    let ev = smallest_eigenpairs(&l, 2).unwrap().eigenvalues;
    let edge_ok = ev == [0.0, 2.0];

    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_dense <= 1e-8 && worst_lap <= 1e-8 && out_of_range <= 1e-8 && edge_ok && worst_projector <= 1e-12 && secs < 20.0,
        format!(
            "max |Δλ| dense {worst_dense:.1e}, Laplacian {worst_lap:.1e}; range excess {out_of_range:.1e}; single edge {:?}; projector idempotence {worst_projector:.1e}; {secs:.2}s",
            ev
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Tries every midpoint between consecutive distinct losses, keeping the
/// first (smallest) best one.
fn exhaustive_threshold(members: &[f64], nonmembers: &[f64]) -> Option<(f64, f64)> {
    let mut all: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut best: Option<(f64, f64)> = None;
    for w in all.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let ba = balanced_accuracy(members, nonmembers, t);
        if best.is_none_or(|(_, b)| ba > b) {
            best = Some((t, ba));
        }
    }
    best
}

fn mia_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for i in 0..100 {
        let nm = rng.random_range(1..=100);
        let nn = rng.random_range(1..=100);
        let shift = rng.random_range(-1.0..2.0);
        let quantize = i % 4 == 0;
        let mut draw = |mu: f64| {
            let v: f64 = (mu + randn(&mut rng)).abs();
            if quantize {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let members: Vec<f64> = (0..nm).map(|_| draw(1.0)).collect();
        let nonmembers: Vec<f64> = (0..nn).map(|_| draw(1.0 + shift)).collect();
        let fit = fit_threshold(&members, &nonmembers).unwrap();
        match exhaustive_threshold(&members, &nonmembers) {
            Some((t, ba)) if t == fit.tau_pre() && ba == fit.balanced_accuracy() => {}
            None if fit.flag().is_some() => {}
            _ => mismatches += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(mismatches == 0 && secs < 5.0, format!("{mismatches}/100 mismatches, {secs:.2}s"))
}

// ---------------------------------------------------------------- 5

fn federation_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Dyadic weights and small-integer vectors make every operation exact,
    // so the weighted mean has a single correct bit pattern.
    let mut exact = true;
    for _ in 0..200 {
        let k = rng.random_range(1..=8);
        let dim = rng.random_range(1..=64);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1..=16) as f64).collect();
        let total: f64 = raw.iter().sum();
        let pow2 = total.log2().ceil().exp2();
        let mut weights = raw.clone();
        weights[0] += pow2 - total; // sum is now a power of two
        let vecs: Vec<ParamVector> = (0..k)
            .map(|_| ParamVector::from((0..dim).map(|_| rng.random_range(-64..=64) as f64).collect::<Vec<_>>()))
            .collect();
        let ids: Vec<usize> = (0..k).map(|i| (i * 7 + 3) % 97).collect();
        let updates: Vec<(usize, f64, &ParamVector)> = (0..k).map(|i| (ids[i], weights[i], &vecs[i])).collect();
        let got = aggregate(&updates);
        for c in 0..dim {
            let want: f64 = (0..k).map(|i| weights[i] * vecs[i].as_slice()[c]).sum::<f64>() / pow2;
            exact &= got.as_slice()[c] == want;
        }
    }

    // Permutation invariance of a whole federated run.
    let ds = generate(&SyntheticSpec::tiny(90, 5)).unwrap();
    let assignment = partition_graph(&ds.graph, 4, 5).unwrap();
    let shards = induce_shards(&ds, &assignment).unwrap();
    let cfg = FedConfig {
        rounds: 3,
        clients: 4,
        hidden: 8,
        ..FedConfig::default()
    };
    let base = run_federated(shards.clone(), &cfg).unwrap();
    let mut invariant = true;
    for perm in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        let permuted: Vec<_> = perm.iter().map(|&i| shards[i].clone()).collect();
        let run = run_federated(permuted, &cfg).unwrap();
        invariant &= run.global.as_slice().iter().zip(base.global.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    verdict(
        exact && invariant,
        format!("weighted mean exact on 200 dyadic cases: {exact}; 3 client permutations bit-exact: {invariant}"),
    )
}

// ---------------------------------------------------------------- 6

fn drift_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 500;
    let (c_max, tau) = (10.0, 10.0);
    let theta0 = random_vec(&mut rng, dim);
    let mut theta = theta0.clone();
    let (mut worst_drift, mut worst_step) = (0.0f64, 0.0f64);
    for epoch in 0..500 {
        let mut step = random_vec(&mut rng, dim);
        // Norms from 1e-3 to 1e3, with occasional bursts far above c_max.
        step.scale(10f64.powf(rng.random_range(-3.0..3.0)) / step.norm());
        if epoch % 50 == 0 {
            step.scale(1e4);
        }
        let (next, _) = clip_and_project(&step, &theta, &theta0, c_max, tau);
        worst_step = worst_step.max(next.distance(&theta));
        theta = next;
        worst_drift = worst_drift.max(theta.distance(&theta0));
    }
    verdict(
        worst_drift <= tau + 1e-9 && worst_step <= c_max + 1e-9,
        format!("500 epochs: max drift {worst_drift:.12}, max applied step {worst_step:.12}"),
    )
}

// ---------------------------------------------------------------- 7–12

fn cora_path() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("FEDGCV_CORA") {
        return Some(PathBuf::from(p)).filter(|p| p.is_file());
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cora.json");
    p.is_file().then_some(p)
}

struct CoraRun {
    cfg: ExperimentConfig,
    report: ResultsReport,
    minutes: f64,
    _dir: tempfile::TempDir,
}

fn cora_run(path: PathBuf) -> Result<CoraRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        dataset: Some(path),
        output: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let out = run_pipeline_with(
        &cfg,
        &[Phase::Train, Phase::Unlearn, Phase::Repair, Phase::Retrain, Phase::Ablation],
        RunOptions { resume: false },
    )
    .map_err(|e| e.to_string())?;
    Ok(CoraRun {
        cfg,
        report: out.report,
        minutes: start.elapsed().as_secs_f64() / 60.0,
        _dir: dir,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn cora_criteria(run: &CoraRun) -> Vec<Verdict> {
    let r = &run.report;
    let m = |label: &str| r.metrics(label).expect("phase ran").clone();
    let (pre, unl, rep, retrain) = (m("pre"), m("post_unlearn"), m("post_repair"), m("retrain"));
    let (full, no_gru, no_virtual) = (m("ablation_full"), m("ablation_no_gru"), m("ablation_no_virtual"));
    let within = |minutes: f64| minutes <= 15.0;
    let mut out = Vec::new();

    out.push(verdict(
        (0.774..=0.874).contains(&pre.accuracy) && within(run.minutes),
        format!("pre-unlearning accuracy {} (band 77.4–87.4%), run {:.1} min", pct(pre.accuracy), run.minutes),
    ));
    out.push(verdict(
        (0.744..=0.844).contains(&rep.accuracy) && unl.mia_rate_post <= 0.15 && unl.mia_rate_post <= 0.5 * pre.mia_rate_post,
        format!(
            "post-repair accuracy {} (band 74.4–84.4%), post-unlearning MIA {} (≤ 15% and ≤ half of pre {})",
            pct(rep.accuracy),
            pct(unl.mia_rate_post),
            pct(pre.mia_rate_post)
        ),
    ));
    out.push(verdict(
        no_gru.mia_rate_post >= full.mia_rate_post + 0.05 && no_virtual.accuracy <= full.accuracy - 0.05,
        format!(
            "MIA no_gru {} vs full {}; accuracy no_virtual {} vs full {}",
            pct(no_gru.mia_rate_post),
            pct(full.mia_rate_post),
            pct(no_virtual.accuracy),
            pct(full.accuracy)
        ),
    ));

    let (independent, independence) = match retrain_independence(&run.cfg) {
        Ok(b) => (b, b.to_string()),
        Err(e) => (false, format!("error: {e}")),
    };
    out.push(verdict(
        retrain.mia_rate_post <= 0.10 && independent,
        format!(
            "retrain MIA {} (≤ 10%); bit-independent of departed features: {independence}",
            pct(retrain.mia_rate_post)
        ),
    ));

    out.push(tau_sweep(&run.cfg));

    out.push(verdict(
        rep.mia_rate_post <= unl.mia_rate_post + 0.05,
        format!("MIA pre-repair {} → post-repair {} (rebound ≤ 5 pts)", pct(unl.mia_rate_post), pct(rep.mia_rate_post)),
    ));
    out
}

fn retrain_independence(cfg: &ExperimentConfig) -> fedgcv_core::Result<bool> {
    let ctx = Context::prepare(cfg)?;
    let base = retrain_oracle(&ctx.shards, &cfg.federation, cfg.target)?;
    let mut shards = ctx.shards.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for s in shards.iter_mut().filter(|s| s.client_id == cfg.target) {
        s.local.features.mapv_inplace(|v| v + randn(&mut rng));
    }
    let perturbed = retrain_oracle(&shards, &cfg.federation, cfg.target)?;
    Ok(base.global.as_slice().iter().zip(perturbed.global.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn tau_sweep(cfg: &ExperimentConfig) -> Verdict {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut cfg = cfg.clone();
    cfg.output = dir.path().to_path_buf();
    cfg.sweep = Some(SweepSpec {
        param: "tau".into(),
        values: vec![2.0, 5.0, 10.0, 20.0, 50.0],
        seeds: 3,
    });
    match run_pipeline_with(&cfg, &[Phase::Sweep], RunOptions { resume: false }) {
        Ok(out) => {
            let s = out.report.sweep.expect("sweep ran");
            verdict(
                s.accuracy_range() <= 0.08 && s.mia_range() <= 0.10,
                format!(
                    "accuracy range {} (≤ 8 pts), MIA range {} (≤ 10 pts) over τ ∈ {{2,5,10,20,50}}, 3 seeds",
                    pct(s.accuracy_range()),
                    pct(s.mia_range())
                ),
            )
        }
        Err(e) => verdict(false, format!("sweep failed: {e}")),
    }
}

// ----------------------------------------------------------------

const NAMES: [&str; 12] = [
    "gradient correction",
    "GCN and VGAE gradient checks",
    "spectral suite",
    "MIA oracle equivalence",
    "federation algebra",
    "drift and clipping",
    "Cora pre-unlearning accuracy",
    "Cora full pipeline",
    "Cora ablation directionality",
    "Cora retrain oracle",
    "Cora tau sensitivity",
    "privacy non-rebound",
];

fn main() {
    let mut verdicts = vec![
        gradient_correction_suite(),
        gradient_checks(),
        spectral_suite(),
        mia_oracle(),
        federation_algebra(),
        drift_fuzz(),
    ];
    match cora_path() {
        Some(path) => match cora_run(path) {
            Ok(run) => verdicts.extend(cora_criteria(&run)),
            Err(e) => verdicts.extend((0..6).map(|_| verdict(false, format!("pipeline failed: {e}")))),
        },
        None => verdicts.extend((0..6).map(|_| Verdict {
            outcome: Outcome::Unavailable,
            detail: "Cora dataset not found (set FEDGCV_CORA or provide data/cora.json)".into(),
        })),
    }

    let strict = std::env::var_os("FEDGCV_STRICT").is_some();
    let mut failed = false;
    for (i, (v, name)) in verdicts.iter().zip(NAMES).enumerate() {
        let tag = if v.outcome == Outcome::Pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} [{tag}] {name}: {}", i + 1, v.detail);
        failed |= v.outcome == Outcome::Fail || (strict && v.outcome == Outcome::Unavailable);
    }
    let passed = verdicts.iter().filter(|v| v.outcome == Outcome::Pass).count();
    println!("{passed}/{} criteria passed", verdicts.len());
    if failed {
        std::process::exit(1);
    }
}
