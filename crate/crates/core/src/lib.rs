//! Federated graph unlearning on a simulated FedAvg cluster of GCN clients.
//!
//! A withdrawing client's contribution is removed by gradient ascent on a
//! preference-style forgetting loss, with the update projected away from
//! conflict with the retained clients' descent direction. Utility is then
//! restored with a few federated rounds that include a synthetic "virtual"
//! client generated from the departed client's spectral and feature
//! statistics.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod graph;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod unlearning;
pub mod virtual_client;

pub use error::{Error, Result};
pub use evaluation::{MiaThreshold, Split};
pub use experiment::{AblationVariant, ExperimentConfig, MetricsReport, Phase, ResultsReport};
pub use federation::{FedConfig, ServerState};
pub use graph::{ClientShard, Dataset, PropagationMatrix, SparseGraph};
pub use nn::{GcnParams, GcnShape, ParamVector, TrainConfig};
pub use unlearning::UnlearnConfig;
pub use virtual_client::VirtualConfig;
