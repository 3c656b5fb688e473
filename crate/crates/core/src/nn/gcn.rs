//! Two-layer GCN forward pass and its hand-derived reverse pass.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::cross_entropy_logit_grad;
use super::params::{GcnParams, ParamVector};
use crate::error::{Error, Result};
use crate::graph::PropagationMatrix;

/// Training-mode dropout on the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

/// Intermediates recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `Â X W1 + b1` (pre-activation).
    pre_hidden: Array2<f64>,
    /// Inverted-dropout multipliers (`0` or `1/(1-p)`), absent in inference mode.
    keep: Option<Array2<f64>>,
    /// `Â · drop(ReLU(pre_hidden))`.
    propagated: Array2<f64>,
}

fn check_shapes(params: &GcnParams, a_hat: &PropagationMatrix, x: &Array2<f64>) -> Result<()> {
    let shape = params.shape();
    if x.ncols() != shape.d {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            x.ncols(),
            shape.d
        )));
    }
    if a_hat.n() != x.nrows() {
        return Err(Error::Shape(format!(
            "propagation matrix is {0}x{0} but features have {1} rows",
            a_hat.n(),
            x.nrows()
        )));
    }
    if params.b1.len() != shape.h || params.w2.nrows() != shape.h || params.b2.len() != shape.c {
        return Err(Error::Shape("inconsistent GCN parameter shapes".into()));
    }
    Ok(())
}

pub fn gcn_forward(
    params: &GcnParams,
    a_hat: &PropagationMatrix,
    x: &Array2<f64>,
    dropout: Option<Dropout>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_shapes(params, a_hat, x)?;
    let xw = x.dot(&params.w1);
    let mut pre_hidden = a_hat.matmul(xw.view());
    pre_hidden += &params.b1;
    let mut hidden = pre_hidden.mapv(|v| v.max(0.0));

    let keep = match dropout {
        Some(Dropout { p, seed }) if p > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (1.0 - p);
            let keep = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    scale
                }
            });
            hidden *= &keep;
            Some(keep)
        }
        _ => None,
    };

    let propagated = a_hat.matmul(hidden.view());
    let mut logits = propagated.dot(&params.w2);
    logits += &params.b2;
    Ok((
        logits,
        ForwardCache {
            pre_hidden,
            keep,
            propagated,
        },
    ))
}

/// Inference-mode logits.
pub fn gcn_logits(params: &GcnParams, a_hat: &PropagationMatrix, x: &Array2<f64>) -> Result<Array2<f64>> {
    gcn_forward(params, a_hat, x, None).map(|(logits, _)| logits)
}

/// Back-propagates an arbitrary logit gradient to every parameter.
pub fn backward_from_logits(
    params: &GcnParams,
    a_hat: &PropagationMatrix,
    x: &Array2<f64>,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> GcnParams {
    let b2 = dlogits.sum_axis(Axis(0));
    let w2 = cache.propagated.t().dot(dlogits);
    let d_propagated = dlogits.dot(&params.w2.t());
    let mut d_hidden = a_hat.matmul(d_propagated.view());
    if let Some(keep) = &cache.keep {
        d_hidden *= keep;
    }
    Zip::from(&mut d_hidden)
        .and(&cache.pre_hidden)
        .for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
    let b1 = d_hidden.sum_axis(Axis(0));
    let d_xw = a_hat.matmul(d_hidden.view());
    let w1 = x.t().dot(&d_xw);
    GcnParams { w1, b1, w2, b2 }
}

/// Adds the gradient of `(λ/2)(‖W1‖² + ‖W2‖²)`; biases are not decayed.
pub fn add_weight_decay(grad: &mut GcnParams, params: &GcnParams, weight_decay: f64) {
    if weight_decay != 0.0 {
        grad.w1.scaled_add(weight_decay, &params.w1);
        grad.w2.scaled_add(weight_decay, &params.w2);
    }
}

/// Gradient of masked cross-entropy plus the L2 penalty.
#[allow(clippy::too_many_arguments)]
pub fn gcn_backward(
    params: &GcnParams,
    a_hat: &PropagationMatrix,
    x: &Array2<f64>,
    cache: &ForwardCache,
    logits: &Array2<f64>,
    labels: &[usize],
    mask: &[bool],
    weight_decay: f64,
) -> Result<ParamVector> {
    let dlogits = cross_entropy_logit_grad(logits, labels, mask)?;
    let mut grad = backward_from_logits(params, a_hat, x, cache, &dlogits);
    add_weight_decay(&mut grad, params, weight_decay);
    Ok(grad.flatten())
}

/// `(λ/2)(‖W1‖² + ‖W2‖²)`.
pub fn weight_penalty(params: &GcnParams, weight_decay: f64) -> f64 {
    0.5 * weight_decay * (params.w1.iter().map(|v| v * v).sum::<f64>() + params.w2.iter().map(|v| v * v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, SparseGraph};
    use crate::nn::loss::masked_cross_entropy;
    use crate::nn::params::GcnShape;
    use ndarray::array;

    #[test]
    fn zero_weights_broadcast_bias() {
        let g = SparseGraph::from_edges(3, [(0, 1)]).unwrap();
        let a = normalized_adjacency(&g);
        let mut p = GcnParams::zeros(GcnShape::new(2, 4, 3));
        p.b2 = array![0.5, -1.0, 2.0];
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let logits = gcn_logits(&p, &a, &x).unwrap();
        for row in logits.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn single_node_hand_evaluation() {
        let g = SparseGraph::empty(1).unwrap();
        let a = normalized_adjacency(&g);
        let p = GcnParams {
            w1: array![[1.0, -2.0]],
            b1: array![0.0, 0.0],
            w2: array![[1.0, 0.0], [0.0, 1.0]],
            b2: array![0.0, 0.0],
        };
        let logits = gcn_logits(&p, &a, &array![[1.5]]).unwrap();
        assert_eq!(logits.row(0).to_vec(), vec![1.5, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let g = SparseGraph::empty(2).unwrap();
        let a = normalized_adjacency(&g);
        let p = GcnParams::zeros(GcnShape::new(3, 2, 2));
        assert!(matches!(gcn_logits(&p, &a, &Array2::zeros((2, 2))), Err(Error::Shape(_))));
        assert!(matches!(gcn_logits(&p, &a, &Array2::zeros((3, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_decay_alone() {
        let g = SparseGraph::from_edges(2, [(0, 1)]).unwrap();
        let a = normalized_adjacency(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GcnParams::glorot(GcnShape::new(2, 3, 2), &mut rng);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let (logits, cache) = gcn_forward(&p, &a, &x, None).unwrap();
        let with = gcn_backward(&p, &a, &x, &cache, &logits, &[0, 1], &[true, true], 0.1).unwrap();
        let without = gcn_backward(&p, &a, &x, &cache, &logits, &[0, 1], &[true, true], 0.0).unwrap();
        let diff = GcnParams::unflatten(p.shape(), &(&with - &without)).unwrap();
        assert!(diff.w1.iter().zip(p.w1.iter()).all(|(d, w)| (d - 0.1 * w).abs() < 1e-15));
        assert!(diff.w2.iter().zip(p.w2.iter()).all(|(d, w)| (d - 0.1 * w).abs() < 1e-15));
        assert!(diff.b1.iter().chain(diff.b2.iter()).all(|&d| d == 0.0));
    }

    #[test]
    fn zero_weight_bias_gradient_is_residual_mean() {
        // With zero weights every node sees logits = b2 = 0, so the only
        // non-zero gradient is on b2: mean over the mask of softmax − onehot.
        let g = SparseGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let a = normalized_adjacency(&g);
        let p = GcnParams::zeros(GcnShape::new(2, 2, 2));
        let x = array![[1.0, 0.5], [0.2, 0.1], [0.0, 1.0]];
        let (logits, cache) = gcn_forward(&p, &a, &x, None).unwrap();
        let grad = gcn_backward(&p, &a, &x, &cache, &logits, &[0, 0, 1], &[true, true, true], 0.0).unwrap();
        let grad = GcnParams::unflatten(p.shape(), &grad).unwrap();
        assert!(grad.w1.iter().chain(grad.w2.iter()).chain(grad.b1.iter()).all(|&v| v == 0.0));
        assert!((grad.b2[0] - (0.5 - 2.0 / 3.0)).abs() < 1e-15);
        assert!((grad.b2[1] - (0.5 - 1.0 / 3.0)).abs() < 1e-15);

        // Finite differences on b2 agree.
        let eps = 1e-6;
        for c in 0..2 {
            let mut plus = p.clone();
            plus.b2[c] += eps;
            let mut minus = p.clone();
            minus.b2[c] -= eps;
            let lp = masked_cross_entropy(&gcn_logits(&plus, &a, &x).unwrap(), &[0, 0, 1], &[true; 3]).unwrap();
            let lm = masked_cross_entropy(&gcn_logits(&minus, &a, &x).unwrap(), &[0, 0, 1], &[true; 3]).unwrap();
            assert!(((lp - lm) / (2.0 * eps) - grad.b2[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn dropout_is_reproducible_and_p0_is_inference() {
        let g = SparseGraph::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let a = normalized_adjacency(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = GcnParams::glorot(GcnShape::new(3, 8, 2), &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3);
        let d = Some(Dropout { p: 0.5, seed: 99 });
        let (l1, _) = gcn_forward(&p, &a, &x, d).unwrap();
        let (l2, _) = gcn_forward(&p, &a, &x, d).unwrap();
        assert_eq!(l1, l2);
        let (l0, _) = gcn_forward(&p, &a, &x, Some(Dropout { p: 0.0, seed: 99 })).unwrap();
        assert_eq!(l0, gcn_logits(&p, &a, &x).unwrap());
    }
}
