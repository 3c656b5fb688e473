use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CsrMatrix, SparseGraph};
use crate::error::{Error, Result};

/// Symmetrically normalized adjacency with self-loops, `D̃^{-1/2}(A + I)D̃^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix(CsrMatrix);

impl PropagationMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

impl std::ops::Deref for PropagationMatrix {
    type Target = CsrMatrix;
    fn deref(&self) -> &CsrMatrix {
        &self.0
    }
}

/// How the normalized Laplacian treats degree-zero nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedNodePolicy {
    /// `D^{-1/2}` is 0 at isolated nodes, so their Laplacian row is `e_i`.
    #[default]
    ZeroDegreeInverse,
    Reject,
}

pub fn normalized_adjacency(g: &SparseGraph) -> PropagationMatrix {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt())
        .collect();
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(g.degree(i) + 1);
            row.push((i, inv_sqrt[i] * inv_sqrt[i]));
            row.extend(g.neighbors(i).iter().map(|&j| (j, inv_sqrt[i] * inv_sqrt[j])));
            row
        })
        .collect();
    PropagationMatrix(CsrMatrix::from_rows(n, rows))
}

fn degree_inv_sqrt(g: &SparseGraph, policy: IsolatedNodePolicy) -> Result<Vec<f64>> {
    (0..g.num_nodes())
        .map(|i| match g.degree(i) {
            0 if policy == IsolatedNodePolicy::Reject => Err(Error::DegreeZero { node: i }),
            0 => Ok(0.0),
            d => Ok(1.0 / (d as f64).sqrt()),
        })
        .collect()
}

/// `I − D^{-1/2} A D^{-1/2}` in sparse form.
pub fn normalized_laplacian_sparse(g: &SparseGraph, policy: IsolatedNodePolicy) -> Result<CsrMatrix> {
    let inv = degree_inv_sqrt(g, policy)?;
    let n = g.num_nodes();
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(g.degree(i) + 1);
            row.push((i, 1.0));
            row.extend(g.neighbors(i).iter().map(|&j| (j, -inv[i] * inv[j])));
            row
        })
        .collect();
    Ok(CsrMatrix::from_rows(n, rows))
}

/// Dense `I − D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(g: &SparseGraph, policy: IsolatedNodePolicy) -> Result<Array2<f64>> {
    Ok(normalized_laplacian_sparse(g, policy)?.to_dense())
}
