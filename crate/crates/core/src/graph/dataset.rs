use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SparseGraph;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Node-classification dataset: graph, features, labels and split masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: SparseGraph,
    /// `n × d` feature matrix.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Structural checks that hold for every dataset, including client shards.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.nrows() != n {
            return Err(Error::Validation(format!(
                "feature matrix has {} rows but the graph has {n} nodes",
                self.features.nrows()
            )));
        }
        for (name, len) in [
            ("y", self.labels.len()),
            ("train_mask", self.train_mask.len()),
            ("val_mask", self.val_mask.len()),
            ("test_mask", self.test_mask.len()),
        ] {
            if len != n {
                return Err(Error::Validation(format!("`{name}` has length {len}, expected {n}")));
            }
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "label {y} at node {i} is outside [0, {})",
                self.num_classes
            )));
        }
        for i in 0..n {
            let set = [self.train_mask[i], self.val_mask[i], self.test_mask[i]]
                .iter()
                .filter(|&&b| b)
                .count();
            if set > 1 {
                return Err(Error::Validation(format!("split masks overlap at node {i}")));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("feature matrix contains non-finite values".into()));
        }
        Ok(())
    }

    /// Full validation applied to whole datasets at load time: shape checks plus
    /// class coverage.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let mut seen = vec![false; self.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("class {c} has no labeled node")));
        }
        Ok(())
    }

    pub fn mask_count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&b| b).count()
    }

    /// Scales every feature row to unit L1 norm (zero rows are left alone).
    pub fn row_normalize_features(&mut self) {
        for mut row in self.features.rows_mut() {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
    }

    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            format_version: DATASET_FORMAT_VERSION,
            n: self.num_nodes(),
            d: self.num_features(),
            c: self.num_classes,
            edges: self.graph.edges().iter().map(|&(u, v)| [u, v]).collect(),
            x: self.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            y: self.labels.clone(),
            train_mask: self.train_mask.clone(),
            val_mask: self.val_mask.clone(),
            test_mask: self.test_mask.clone(),
        }
    }
}

/// On-disk JSON layout of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

fn default_version() -> u32 {
    DATASET_FORMAT_VERSION
}

impl DatasetFile {
    pub fn into_dataset(self) -> Result<Dataset> {
        let ds = self.into_dataset_unchecked()?;
        ds.validate()?;
        Ok(ds)
    }

    /// Like [`DatasetFile::into_dataset`] but applies only the shape checks,
    /// not class coverage. Used for synthetic shards.
    pub fn into_dataset_unchecked(self) -> Result<Dataset> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported dataset format_version {}",
                self.format_version
            )));
        }
        if self.x.len() != self.n {
            return Err(Error::Validation(format!(
                "`x` has {} rows, expected n = {}",
                self.x.len(),
                self.n
            )));
        }
        let mut flat = Vec::with_capacity(self.n * self.d);
        for (i, row) in self.x.iter().enumerate() {
            if row.len() != self.d {
                return Err(Error::Validation(format!(
                    "feature row {i} has length {}, expected d = {}",
                    row.len(),
                    self.d
                )));
            }
            flat.extend_from_slice(row);
        }
        let features = Array2::from_shape_vec((self.n, self.d), flat)
            .map_err(|e| Error::Validation(e.to_string()))?;
        let graph = SparseGraph::from_edges(self.n, self.edges.iter().map(|e| (e[0], e[1])))?;
        let ds = Dataset {
            graph,
            features,
            labels: self.y,
            num_classes: self.c,
            train_mask: self.train_mask,
            val_mask: self.val_mask,
            test_mask: self.test_mask,
        };
        ds.check_shapes()?;
        Ok(ds)
    }
}

/// Reads and validates a dataset in the canonical JSON format.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let file: DatasetFile = serde_json::from_reader(reader).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    file.into_dataset()
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &ds.to_file())?;
    w.flush()?;
    Ok(())
}
