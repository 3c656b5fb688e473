use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::synthetic::SyntheticSpec;
use crate::unlearning::UnlearnConfig;
use crate::virtual_client::VirtualConfig;

/// Which component an ablation run removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    #[default]
    Full,
    NoGru,
    NoVirtual,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [AblationVariant::Full, AblationVariant::NoGru, AblationVariant::NoVirtual];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoGru => "no_gru",
            AblationVariant::NoVirtual => "no_virtual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}` (expected full, no_gru or no_virtual)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub seed: u64,
    /// Precomputed assignment; overrides the built-in partitioner.
    pub file: Option<PathBuf>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { seed: 2025, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: usize,
}

fn default_sweep_seeds() -> usize {
    3
}

/// Parameters a sweep may vary. Every one of them acts after federated
/// training, so each seed trains once and is shared across sweep values.
pub const SWEEPABLE: [&str; 12] = [
    "tau",
    "drift_radius",
    "beta",
    "scale",
    "clip",
    "margin",
    "margin_weight",
    "unlearn_lr",
    "unlearn_epochs",
    "gamma",
    "sigma_x",
    "repair_rounds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Canonical dataset JSON. Exactly one of `dataset` and `synthetic`.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Scale feature rows to unit L1 norm after loading.
    pub normalize_features: bool,
    pub partition: PartitionConfig,
    pub federation: FedConfig,
    pub unlearn: UnlearnConfig,
    #[serde(rename = "virtual")]
    pub virtual_client: VirtualConfig,
    /// Id of the withdrawing client.
    pub target: usize,
    pub variant: AblationVariant,
    pub output: PathBuf,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            normalize_features: true,
            partition: PartitionConfig::default(),
            federation: FedConfig::default(),
            unlearn: UnlearnConfig::default(),
            virtual_client: VirtualConfig::default(),
            target: 0,
            variant: AblationVariant::Full,
            output: PathBuf::from("results"),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    /// Checks every bound. Keys in errors are dotted JSON paths.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("dataset", "give either `dataset` or `synthetic`, not both")),
            (None, None) => return Err(Error::config("dataset", "a dataset path (or a `synthetic` spec) is required")),
            (Some(p), None) if !p.is_file() => {
                return Err(Error::config("dataset", format!("file {} does not exist", p.display())))
            }
            _ => {}
        }
        if let Some(p) = &self.partition.file {
            if !p.is_file() {
                return Err(Error::config("partition.file", format!("file {} does not exist", p.display())));
            }
        }
        self.federation.validate("federation")?;
        self.unlearn.validate("unlearn")?;
        self.virtual_client.validate("virtual")?;
        if self.target >= self.federation.clients {
            return Err(Error::config(
                "target",
                format!("must lie in [0, {}), got {}", self.federation.clients, self.target),
            ));
        }
        if let Some(sweep) = &self.sweep {
            if !SWEEPABLE.contains(&sweep.param.as_str()) {
                return Err(Error::config("sweep.param", format!("`{}` cannot be swept", sweep.param)));
            }
            if sweep.values.is_empty() {
                return Err(Error::config("sweep.values", "must not be empty"));
            }
            if sweep.seeds == 0 {
                return Err(Error::config("sweep.seeds", "must be >= 1"));
            }
            for &v in &sweep.values {
                let mut probe = self.clone();
                probe.sweep = None;
                probe.apply_param(&sweep.param, v)?;
                probe.unlearn.validate("sweep.values")?;
                probe.virtual_client.validate("sweep.values")?;
            }
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.partition.seed = seed;
        self.federation.seed = seed;
        self.federation.local.seed = seed;
        self.unlearn.seed = seed;
        self.virtual_client.seed = seed;
        if let Some(s) = self.synthetic.as_mut() {
            s.seed = seed;
        }
    }

    /// The seed of federated training, used as the base of sweep seeds.
    pub fn base_seed(&self) -> u64 {
        self.federation.seed
    }

    /// Assigns one sweepable parameter.
    pub fn apply_param(&mut self, param: &str, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config("sweep.values", format!("`{param}` needs a non-negative integer, got {v}")))
            }
        };
        match param {
            "tau" | "drift_radius" => self.unlearn.drift_radius = value,
            "beta" => self.unlearn.beta = value,
            "scale" => self.unlearn.scale = value,
            "clip" => self.unlearn.clip = value,
            "margin" => self.unlearn.margin = value,
            "margin_weight" => self.unlearn.margin_weight = value,
            "unlearn_lr" => self.unlearn.lr = value,
            "unlearn_epochs" => self.unlearn.epochs = count(value)?,
            "gamma" => self.virtual_client.gamma = value,
            "sigma_x" => self.virtual_client.sigma_x = value,
            "repair_rounds" => self.virtual_client.repair_rounds = count(value)?,
            other => return Err(Error::config("sweep.param", format!("`{other}` cannot be swept"))),
        }
        Ok(())
    }

    /// Resolves relative input paths against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset.as_mut() {
            fix(p);
        }
        if let Some(p) = self.partition.file.as_mut() {
            fix(p);
        }
    }
}

/// Parses a JSON config from text. Absent keys take their defaults; relative
/// input paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { String::from("<root>") } else { key }, e.inner().to_string())
    })?;
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Overrides from the environment: `FEDGCV_OUT` replaces the output directory.
pub fn apply_env_overrides(cfg: &mut ExperimentConfig) {
    if let Some(out) = std::env::var_os("FEDGCV_OUT") {
        cfg.output = PathBuf::from(out);
    }
}
