//! Symmetric eigensolvers: dense cyclic Jacobi for small matrices and Lanczos
//! with full reorthogonalization and locking for large sparse ones.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CsrMatrix;
use crate::error::{Error, Result};

/// A real symmetric matrix the solvers can multiply by.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn to_dense(&self) -> Array2<f64>;
    /// Largest `|m_ij − m_ji|`.
    fn asymmetry(&self) -> f64;
    /// Gershgorin interval containing the spectrum.
    fn gershgorin(&self) -> (f64, f64);
}

impl SymmetricOperator for Array2<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.rows()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn to_dense(&self) -> Array2<f64> {
        self.clone()
    }

    fn asymmetry(&self) -> f64 {
        if self.nrows() != self.ncols() {
            return f64::INFINITY;
        }
        let n = self.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self[[i, j]] - self[[j, i]]).abs());
            }
        }
        worst
    }

    fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, row) in self.rows().into_iter().enumerate() {
            let radius: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v.abs())
                .sum();
            lo = lo.min(row[i] - radius);
            hi = hi.max(row[i] + radius);
        }
        (lo, hi)
    }
}

impl SymmetricOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matvec(x, out);
    }

    fn to_dense(&self) -> Array2<f64> {
        CsrMatrix::to_dense(self)
    }

    fn asymmetry(&self) -> f64 {
        CsrMatrix::asymmetry(self)
    }

    fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.nrows() {
            let mut diag = 0.0;
            let mut radius = 0.0;
            for (j, v) in self.row(i) {
                if j == i {
                    diag = v;
                } else {
                    radius += v.abs();
                }
            }
            lo = lo.min(diag - radius);
            hi = hi.max(diag + radius);
        }
        (lo, hi)
    }
}

/// The `k` smallest eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub k: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub eigenvectors: Array2<f64>,
}

impl SpectralProfile {
    /// `‖UᵀU − I‖∞` (max-abs entry).
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigenvectors.t().dot(&self.eigenvectors);
        let mut worst = 0.0f64;
        for ((i, j), v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    /// Largest `‖M u_i − λ_i u_i‖∞` over the stored pairs.
    pub fn max_residual(&self, m: &impl SymmetricOperator) -> f64 {
        let n = m.dim();
        let mut out = vec![0.0; n];
        let mut worst = 0.0f64;
        for (i, &lambda) in self.eigenvalues.iter().enumerate() {
            let u = self.eigenvectors.column(i).to_vec();
            m.apply(&u, &mut out);
            for (o, x) in out.iter().zip(&u) {
                worst = worst.max((o - lambda * x).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Matrices up to this size use dense Jacobi.
    pub dense_cutoff: usize,
    /// Ritz residual tolerance for Lanczos.
    pub tol: f64,
    /// Lanczos matrix-vector budget per requested eigenpair.
    pub budget_per_pair: usize,
    /// Floor on the total Lanczos budget.
    pub min_budget: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            dense_cutoff: 512,
            tol: 1e-10,
            budget_per_pair: 50,
            min_budget: 300,
            seed: 0x5eed_1a9c,
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

pub fn smallest_eigenpairs(m: &impl SymmetricOperator, k: usize) -> Result<SpectralProfile> {
    smallest_eigenpairs_with(m, k, &EigenOptions::default())
}

pub fn smallest_eigenpairs_with(
    m: &impl SymmetricOperator,
    k: usize,
    opts: &EigenOptions,
) -> Result<SpectralProfile> {
    let n = m.dim();
    if k == 0 || k > n {
        return Err(Error::Validation(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    if n <= opts.dense_cutoff {
        let (values, vectors) = jacobi_eigen(&m.to_dense())?;
        let mut ev = vectors.slice(ndarray::s![.., ..k]).to_owned();
        normalize_signs(&mut ev);
        Ok(SpectralProfile {
            k,
            eigenvalues: values[..k].to_vec(),
            eigenvectors: ev,
        })
    } else {
        lanczos_smallest(m, k, opts)
    }
}

/// Full eigendecomposition by cyclic Jacobi rotations. Eigenvalues ascending,
/// eigenvectors as columns.
pub fn jacobi_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("matrix must be square, got {}x{}", n, a.ncols())));
    }
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut converged = n < 2;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                if apq.abs() < 1e-300 {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                // The closed-form diagonal update carries less rounding than the rotated products.
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q].abs())
            .fold(0.0, f64::max);
        return Err(Error::Convergence {
            residual: off,
            iterations: 100,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[row * n + src];
        }
    }
    Ok((values, vectors))
}

/// Eigendecomposition of the symmetric tridiagonal matrix with diagonal `diag`
/// and off-diagonal `off` (`off[i]` couples `i` and `i + 1`) by implicit QL.
/// Eigenvalues ascending, eigenvectors as columns.
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = diag.len();
    if n == 0 || off.len() + 1 < n {
        return Err(Error::Shape(format!(
            "tridiagonal needs {} off-diagonal entries, got {}",
            n.saturating_sub(1),
            off.len()
        )));
    }
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&off[..n - 1]);
    let mut z = Array2::<f64>::eye(n);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 200 {
                return Err(Error::Convergence {
                    residual: e[l].abs(),
                    iterations: iter,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0f64, 1.0f64, 0.0f64);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let zf = z[[k, i + 1]];
                    z[[k, i + 1]] = s * z[[k, i]] + c * zf;
                    z[[k, i]] = c * z[[k, i]] - s * zf;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&z.column(src));
    }
    Ok((values, vectors))
}

/// Flip each column so that its largest-magnitude entry is positive.
fn normalize_signs(vectors: &mut Array2<f64>) {
    for mut col in vectors.columns_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() + 1e-12 {
                best = v;
            }
        }
        if best < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn orthogonalize(w: &mut [f64], against: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in against {
            let h = dot(w, q);
            axpy(-h, q, w);
        }
    }
}

/// Smallest eigenpairs via Lanczos on the shifted operator `σI − M`, locking
/// converged Ritz pairs and restarting from a fresh vector orthogonal to them
/// until the `k` smallest eigenvalues are accounted for.
fn lanczos_smallest(
    m: &impl SymmetricOperator,
    k: usize,
    opts: &EigenOptions,
) -> Result<SpectralProfile> {
    let n = m.dim();
    let (_, hi) = m.gershgorin();
    let sigma = hi;
    let budget = (opts.budget_per_pair * k).max(opts.min_budget);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let shifted = |x: &[f64], out: &mut [f64]| {
        m.apply(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = sigma * xi - *o;
        }
    };

    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked_vecs: Vec<Vec<f64>> = Vec::new();
    let mut matvecs = 0usize;
    let mut worst_residual = f64::INFINITY;
    let mut scratch = vec![0.0; n];
    let mut restart: Option<Vec<f64>> = None;

    loop {
        if locked_vecs.len() >= n {
            break;
        }
        let remaining_dim = n - locked_vecs.len();
        let mut q: Vec<f64> = match restart.take() {
            Some(v) => v,
            None => (0..n).map(|_| rng.random::<f64>() - 0.5).collect(),
        };
        orthogonalize(&mut q, &locked_vecs);
        let norm = dot(&q, &q).sqrt();
        q.iter_mut().for_each(|v| *v /= norm);

        let mut basis: Vec<Vec<f64>> = vec![q];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut newly: Vec<(f64, Vec<f64>)> = Vec::new();
        // A Krylov sequence holds one vector per eigenspace, so repeated
        // eigenvalues never all converge in one run. Lock what has converged
        // once the count stops growing and restart for the remaining copies.
        let (mut last_converged, mut stalled) = (0usize, 0usize);
        loop {
            let j = basis.len() - 1;
            let mut w = vec![0.0; n];
            shifted(&basis[j], &mut w);
            matvecs += 1;
            let alpha = dot(&w, &basis[j]);
            axpy(-alpha, &basis[j], &mut w);
            if j > 0 {
                axpy(-betas[j - 1], &basis[j - 1], &mut w);
            }
            orthogonalize(&mut w, &locked_vecs);
            orthogonalize(&mut w, &basis);
            alphas.push(alpha);
            let beta = dot(&w, &w).sqrt();
            let invariant = beta < 1e-12 || basis.len() >= remaining_dim;
            let out_of_budget = matvecs >= budget;
            if invariant || out_of_budget || basis.len() % 10 == 0 {
                let (theta, y) = tridiagonal_eigen(&alphas, &betas)?;
                let mdim = theta.len();
                // Ritz residual of pair i is |beta * y[last, i]|.
                let mut converged = 0;
                for idx in (0..mdim).rev() {
                    let res = if invariant { 0.0 } else { (beta * y[[mdim - 1, idx]]).abs() };
                    if res <= opts.tol {
                        converged += 1;
                    } else {
                        worst_residual = res;
                        break;
                    }
                }
                let wanted = k.saturating_sub(locked_vals.len()).max(1);
                if converged > 0 && converged == last_converged {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                last_converged = converged;
                if converged > 0 && (converged >= wanted || invariant || out_of_budget || stalled >= 2) {
                    for idx in ((mdim - converged)..mdim).rev() {
                        let mut x = vec![0.0; n];
                        for (b, &coef) in basis.iter().zip(y.column(idx).iter()) {
                            axpy(coef, b, &mut x);
                        }
                        orthogonalize(&mut x, &locked_vecs);
                        orthogonalize(&mut x, &newly.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>());
                        let nx = dot(&x, &x).sqrt();
                        x.iter_mut().for_each(|v| *v /= nx);
                        newly.push((sigma - theta[idx], x));
                    }
                    // Carry the unconverged wanted directions into the next run.
                    let lo = mdim.saturating_sub(wanted.max(converged + 1));
                    if lo < mdim - converged {
                        let mut v = vec![0.0; n];
                        for idx in lo..mdim - converged {
                            for (b, &coef) in basis.iter().zip(y.column(idx).iter()) {
                                axpy(coef, b, &mut v);
                            }
                        }
                        restart = Some(v);
                    }
                    break;
                }
                if out_of_budget {
                    return Err(Error::Convergence {
                        residual: worst_residual,
                        iterations: matvecs,
                    });
                }
            }
            w.iter_mut().for_each(|v| *v /= beta);
            betas.push(beta);
            basis.push(w);
        }

        let kth_before = kth_smallest(&locked_vals, k);
        let run_min = newly.iter().map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
        for (lambda, x) in newly {
            m.apply(&x, &mut scratch);
            let res = scratch
                .iter()
                .zip(&x)
                .map(|(o, xi)| (o - lambda * xi).abs())
                .fold(0.0, f64::max);
            if res > 1e-8 {
                return Err(Error::Convergence {
                    residual: res,
                    iterations: matvecs,
                });
            }
            locked_vals.push(lambda);
            locked_vecs.push(x);
        }
        // A run that finds nothing below the current k-th value proves the k
        // smallest are all locked.
        if let Some(kth) = kth_before {
            if run_min >= kth - opts.tol.sqrt() {
                break;
            }
        }
        if matvecs >= budget {
            return Err(Error::Convergence {
                residual: worst_residual,
                iterations: matvecs,
            });
        }
    }

    let mut order: Vec<usize> = (0..locked_vals.len()).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]));
    let mut vectors = Array2::zeros((n, k));
    let mut values = Vec::with_capacity(k);
    for (col, &src) in order.iter().take(k).enumerate() {
        values.push(locked_vals[src]);
        for row in 0..n {
            vectors[[row, col]] = locked_vecs[src][row];
        }
    }
    normalize_signs(&mut vectors);
    Ok(SpectralProfile {
        k,
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

fn kth_smallest(values: &[f64], k: usize) -> Option<f64> {
    if values.len() < k {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[k - 1])
}

/// Orthogonal projector `U Uᵀ` onto the column span of `u`.
pub fn projector(u: ArrayView2<'_, f64>) -> Array2<f64> {
    u.dot(&u.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn identity_and_diagonal() {
        let p = smallest_eigenpairs(&Array2::<f64>::eye(3), 2).unwrap();
        assert_eq!(p.eigenvalues, vec![1.0, 1.0]);
        assert!(p.orthonormality_error() < 1e-14);

        let d = Array2::from_diag(&array![1.9, 0.1, 0.5]);
        let p = smallest_eigenpairs(&d, 2).unwrap();
        assert_eq!(p.eigenvalues, vec![0.1, 0.5]);
        assert_eq!(p.eigenvectors.column(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(p.eigenvectors.column(1).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let a = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(smallest_eigenpairs(&a, 1), Err(Error::Validation(_))));
        assert!(smallest_eigenpairs(&Array2::<f64>::eye(2), 3).is_err());
        assert!(smallest_eigenpairs(&Array2::<f64>::eye(2), 0).is_err());
    }

    #[test]
    fn tridiagonal_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 30;
        let diag: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let off: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut t = Array2::from_diag(&ndarray::Array1::from(diag.clone()));
        for i in 0..n - 1 {
            t[[i, i + 1]] = off[i];
            t[[i + 1, i]] = off[i];
        }
        let (a, _) = tridiagonal_eigen(&diag, &off).unwrap();
        let (b, _) = jacobi_eigen(&t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn lanczos_handles_repeated_eigenvalues() {
        // Block diagonal with three identical 2-node components: eigenvalue 0
        // with multiplicity three.
        let mut a = Array2::<f64>::zeros((6, 6));
        for b in 0..3 {
            let (i, j) = (2 * b, 2 * b + 1);
            a[[i, i]] = 1.0;
            a[[j, j]] = 1.0;
            a[[i, j]] = -1.0;
            a[[j, i]] = -1.0;
        }
        let opts = EigenOptions {
            dense_cutoff: 0,
            ..Default::default()
        };
        let p = smallest_eigenpairs_with(&a, 4, &opts).unwrap();
        for (got, want) in p.eigenvalues.iter().zip([0.0, 0.0, 0.0, 2.0]) {
            assert!((got - want).abs() < 1e-9, "{:?}", p.eigenvalues);
        }
        assert!(p.orthonormality_error() < 1e-9);
        assert!(p.max_residual(&a) < 1e-8);
    }
}
