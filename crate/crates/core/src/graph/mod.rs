//! Graph data model, dataset ingestion, propagation matrices, the symmetric
//! eigensolver and client partitioning.

mod dataset;
mod eigen;
mod partition;
mod propagation;
mod shard;
mod sparse;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetFile, DATASET_FORMAT_VERSION};
pub use eigen::{
    jacobi_eigen, projector, smallest_eigenpairs, smallest_eigenpairs_with, tridiagonal_eigen, EigenOptions,
    SpectralProfile, SymmetricOperator,
};
pub use partition::{
    edge_cut, load_partition, partition_graph, save_partition, PARTITION_FORMAT_VERSION,
};
pub use propagation::{
    normalized_adjacency, normalized_laplacian, normalized_laplacian_sparse, IsolatedNodePolicy,
    PropagationMatrix,
};
pub use shard::{induce_shards, merge_features, ClientShard};
pub use sparse::CsrMatrix;

use crate::error::{Error, Result};

/// Undirected simple graph stored as a symmetric 0/1 CSR adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    /// Unordered pairs with `u < v`, sorted and unique.
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from an arbitrary edge list. Direction and duplicates are
    /// ignored; self-loops are dropped. Endpoints outside `[0, n)` are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        let mut pairs = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) has an endpoint outside [0, {n})"
                )));
            }
            if u != v {
                pairs.push((u.min(v), u.max(v)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut degree = vec![0usize; n];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; offsets[n]];
        for &(u, v) in &pairs {
            neighbors[fill[u]] = v;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(Self {
            n,
            edges: pairs,
            offsets,
            neighbors,
        })
    }

    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Result<Self> {
        Self::from_edges(n, std::iter::empty())
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Unordered edges, `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Dense 0/1 adjacency (no self-loops).
    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        let mut a = ndarray::Array2::zeros((self.n, self.n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// Builds a graph from a dense matrix, treating every off-diagonal entry
    /// above 0.5 in the upper triangle as an edge.
    pub fn from_dense(a: &ndarray::Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if a[[i, j]] > 0.5 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, edges)
    }

    /// Number of connected components (union-find).
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = self.n;
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru] = rv;
                count -= 1;
            }
        }
        count
    }
}
