//! Seeded generator for citation-style benchmark graphs: degree-heterogeneous
//! homophilous edges, sparse binary bag-of-words features and random split
//! masks. Used for tests, benchmarks and smoke runs.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, SparseGraph};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    pub edges: usize,
    /// Fraction of edges whose endpoints share a class.
    pub homophily: f64,
    /// Mean number of active words per node.
    pub words_per_node: f64,
    /// Topic words per class.
    pub topic_words: usize,
    /// Probability that an active word is drawn from the node's class topic.
    pub topic_mix: f64,
    /// Log-normal shape of the per-node degree propensity.
    pub degree_spread: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::cora_like()
    }
}

impl SyntheticSpec {
    /// Cora-sized defaults: 2708 nodes, 7 classes, 1433 binary features,
    /// 5278 undirected edges and a 20/20/60 split.
    pub fn cora_like() -> Self {
        Self {
            nodes: 2708,
            classes: 7,
            features: 1433,
            edges: 5278,
            homophily: 0.81,
            words_per_node: 18.0,
            topic_words: 120,
            topic_mix: 0.25,
            degree_spread: 0.9,
            train_fraction: 0.2,
            val_fraction: 0.2,
            seed: 2025,
        }
    }

    /// A small instance for smoke tests.
    pub fn tiny(nodes: usize, seed: u64) -> Self {
        Self {
            nodes,
            classes: 3,
            features: 24,
            edges: nodes * 2,
            homophily: 0.85,
            words_per_node: 5.0,
            topic_words: 6,
            topic_mix: 0.6,
            degree_spread: 0.5,
            train_fraction: 0.4,
            val_fraction: 0.2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nodes < 2 * self.classes || self.classes < 2 {
            return Err(Error::Validation("need >= 2 classes and >= 2 nodes per class".into()));
        }
        if self.topic_words * self.classes > self.features {
            return Err(Error::Validation("topic vocabularies exceed the feature count".into()));
        }
        if self.edges > self.nodes * (self.nodes - 1) / 4 {
            return Err(Error::Validation("requested edge count is too dense".into()));
        }
        if !(0.0..=1.0).contains(&self.homophily) || !(0.0..=1.0).contains(&self.topic_mix) {
            return Err(Error::Validation("homophily and topic_mix must lie in [0, 1]".into()));
        }
        if self.train_fraction + self.val_fraction >= 1.0 || self.train_fraction <= 0.0 {
            return Err(Error::Validation("split fractions must leave room for a test set".into()));
        }
        Ok(())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[stream::SYNTHETIC]);
    let n = spec.nodes;
    let c = spec.classes;

    // Balanced-ish labels: every class appears, the rest uniform.
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * c { i % c } else { rng.random_range(0..c) }).collect();
    labels.shuffle(&mut rng);

    let spread = LogNormal::new(0.0, spec.degree_spread).map_err(|e| Error::Validation(e.to_string()))?;
    let propensity: Vec<f64> = (0..n).map(|_| spread.sample(&mut rng)).collect();
    let members: Vec<Vec<usize>> = (0..c).map(|k| (0..n).filter(|&i| labels[i] == k).collect()).collect();
    let by_class: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| propensity[i])).expect("non-empty class"))
        .collect();
    let anyone = WeightedIndex::new(&propensity).expect("positive propensities");

    let mut edges = std::collections::BTreeSet::new();
    while edges.len() < spec.edges {
        let u = anyone.sample(&mut rng);
        let v = if rng.random_bool(spec.homophily) {
            let k = labels[u];
            members[k][by_class[k].sample(&mut rng)]
        } else {
            let mut k = rng.random_range(0..c - 1);
            if k >= labels[u] {
                k += 1;
            }
            members[k][by_class[k].sample(&mut rng)]
        };
        if u != v {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let graph = SparseGraph::from_edges(n, edges)?;

    let mut vocab: Vec<usize> = (0..spec.features).collect();
    vocab.shuffle(&mut rng);
    let topics: Vec<&[usize]> = (0..c).map(|k| &vocab[k * spec.topic_words..(k + 1) * spec.topic_words]).collect();
    let mut features = Array2::zeros((n, spec.features));
    for i in 0..n {
        let words = 1 + (rng.random::<f64>() * 2.0 * (spec.words_per_node - 1.0)).round() as usize;
        for _ in 0..words {
            let w = if rng.random_bool(spec.topic_mix) {
                topics[labels[i]][rng.random_range(0..spec.topic_words)]
            } else {
                rng.random_range(0..spec.features)
            };
            features[[i, w]] = 1.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let mut train_mask = vec![false; n];
    let mut val_mask = vec![false; n];
    let mut test_mask = vec![false; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            train_mask[i] = true;
        } else if rank < n_train + n_val {
            val_mask[i] = true;
        } else {
            test_mask[i] = true;
        }
    }

    let ds = Dataset {
        graph,
        features,
        labels,
        num_classes: c,
        train_mask,
        val_mask,
        test_mask,
    };
    ds.validate()?;
    Ok(ds)
}

/// Fraction of edges joining same-class endpoints.
pub fn edge_homophily(ds: &Dataset) -> f64 {
    let edges = ds.graph.edges();
    if edges.is_empty() {
        return 0.0;
    }
    edges.iter().filter(|&&(u, v)| ds.labels[u] == ds.labels[v]).count() as f64 / edges.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cora_like_shape() {
        let ds = generate(&SyntheticSpec::cora_like()).unwrap();
        assert_eq!(ds.num_nodes(), 2708);
        assert_eq!(ds.num_features(), 1433);
        assert_eq!(ds.graph.num_edges(), 5278);
        assert_eq!(Dataset::mask_count(&ds.train_mask), 542);
        let h = edge_homophily(&ds);
        assert!((h - 0.81).abs() < 0.03, "{h}");
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::tiny(40, 3);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_ne!(generate(&spec).unwrap(), generate(&SyntheticSpec::tiny(40, 4)).unwrap());
    }
}
