use ndarray::{Array2, Axis};

use super::{normalized_adjacency, Dataset, PropagationMatrix, SparseGraph};
use crate::error::{Error, Result};

/// One client's induced subgraph with its features, labels and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Local index → index in the original dataset.
    pub global_ids: Vec<usize>,
    pub local: Dataset,
    /// Propagation matrix of `local.graph`, computed once.
    pub a_hat: PropagationMatrix,
}

impl ClientShard {
    pub fn new(client_id: usize, global_ids: Vec<usize>, local: Dataset) -> Self {
        let a_hat = normalized_adjacency(&local.graph);
        Self {
            client_id,
            global_ids,
            local,
            a_hat,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.local.num_nodes()
    }

    pub fn num_train(&self) -> usize {
        Dataset::mask_count(&self.local.train_mask)
    }
}

/// Splits `ds` into one shard per part. Edges crossing parts are dropped.
/// Shards are returned in part order; a part with no nodes yields no shard.
pub fn induce_shards(ds: &Dataset, assignment: &[usize]) -> Result<Vec<ClientShard>> {
    let n = ds.num_nodes();
    if assignment.len() != n {
        return Err(Error::Shape(format!(
            "assignment has length {}, dataset has {n} nodes",
            assignment.len()
        )));
    }
    let parts = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); parts];
    let mut local_index = vec![0usize; n];
    for (u, &p) in assignment.iter().enumerate() {
        local_index[u] = members[p].len();
        members[p].push(u);
    }
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); parts];
    for &(u, v) in ds.graph.edges() {
        if assignment[u] == assignment[v] {
            edges[assignment[u]].push((local_index[u], local_index[v]));
        }
    }

    let mut shards = Vec::new();
    for (part, (ids, part_edges)) in members.into_iter().zip(edges).enumerate() {
        if ids.is_empty() {
            continue;
        }
        let graph = SparseGraph::from_edges(ids.len(), part_edges)?;
        let local = Dataset {
            graph,
            features: ds.features.select(Axis(0), &ids),
            labels: ids.iter().map(|&u| ds.labels[u]).collect(),
            num_classes: ds.num_classes,
            train_mask: ids.iter().map(|&u| ds.train_mask[u]).collect(),
            val_mask: ids.iter().map(|&u| ds.val_mask[u]).collect(),
            test_mask: ids.iter().map(|&u| ds.test_mask[u]).collect(),
        };
        shards.push(ClientShard::new(part, ids, local));
    }
    Ok(shards)
}

/// Scatters shard feature rows back into an `n × d` matrix.
pub fn merge_features(shards: &[ClientShard], n: usize) -> Array2<f64> {
    let d = shards.first().map_or(0, |s| s.local.num_features());
    let mut out = Array2::zeros((n, d));
    for shard in shards {
        for (local, &global) in shard.global_ids.iter().enumerate() {
            out.row_mut(global).assign(&shard.local.features.row(local));
        }
    }
    out
}
