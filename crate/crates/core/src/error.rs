use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("node {node} has degree zero and the isolated-node policy is `reject`")]
    DegreeZero { node: usize },

    #[error("eigensolver did not converge: worst residual {residual:.3e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss mask selects no nodes")]
    EmptyMask,

    #[error("no nodes in the `{0}` split")]
    EmptySplit(String),

    #[error("VGAE training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("phase `{phase}` requires phase `{requires}`")]
    PhaseDependency { phase: String, requires: String },

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_phase(self, phase: &str) -> Self {
        Error::Phase {
            phase: phase.to_string(),
            source: Box::new(self),
        }
    }

    /// True if this error (or the phase error wrapping it) is a configuration problem.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config { .. } | Error::PhaseDependency { .. } => true,
            Error::Phase { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
