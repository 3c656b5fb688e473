use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::Phase;
use crate::error::{Error, Result};
use crate::evaluation::MiaThreshold;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub accuracy: Option<f64>,
    pub mia_rate: Option<f64>,
    pub loss: Option<f64>,
}

/// Accuracy and membership-inference rates of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Test accuracy; over retained clients once the target has left.
    pub accuracy: f64,
    /// MIA rate of the pre-unlearning model on the target's members.
    pub mia_rate_pre: f64,
    /// MIA rate of this model under the same frozen threshold.
    pub mia_rate_post: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: Phase,
    pub metrics: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub accuracy: f64,
    pub mia_rate: f64,
    /// Per-epoch MIA rate during unlearning followed by per-round repair accuracy.
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mia_mean: f64,
    pub mia_std: f64,
    pub runs: Vec<SweepRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Largest minus smallest mean accuracy across points.
    pub fn accuracy_range(&self) -> f64 {
        range(self.points.iter().map(|p| p.accuracy_mean))
    }

    pub fn mia_range(&self) -> f64 {
        range(self.points.iter().map(|p| p.mia_mean))
    }
}

fn range(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub threshold: Option<MiaThreshold>,
    pub phases: Vec<PhaseResult>,
    pub sweep: Option<SweepReport>,
    pub warnings: Vec<String>,
}

impl ResultsReport {
    pub fn metrics(&self, label: &str) -> Option<&MetricsReport> {
        self.phases.iter().flat_map(|p| &p.metrics).find(|m| m.label == label)
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    phase: &'a str,
    label: &'a str,
    accuracy: f64,
    accuracy_std: Option<f64>,
    mia_rate_pre: Option<f64>,
    mia_rate_post: f64,
    mia_rate_post_std: Option<f64>,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    series: &'a str,
    step: usize,
    accuracy: Option<f64>,
    mia_rate: Option<f64>,
    loss: Option<f64>,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Writes `report.json`, `metrics.csv` and `curves.csv` into `dir`. The
/// payloads carry no timestamps, so re-emitting a report is byte-identical.
pub fn emit_results(report: &ResultsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;

    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    let mut names = Vec::new();
    for p in &report.phases {
        for m in &p.metrics {
            metrics.push(MetricsRow {
                phase: p.phase.as_str(),
                label: &m.label,
                accuracy: m.accuracy,
                accuracy_std: None,
                mia_rate_pre: Some(m.mia_rate_pre),
                mia_rate_post: m.mia_rate_post,
                mia_rate_post_std: None,
            });
            names.push((m.label.clone(), &m.curve));
        }
    }
    let mut sweep_labels = Vec::new();
    if let Some(s) = &report.sweep {
        for pt in &s.points {
            sweep_labels.push(format!("{}={}", s.param, pt.value));
            for run in &pt.runs {
                names.push((format!("sweep/{}={}/seed={}", s.param, pt.value, run.seed), &run.curve));
            }
        }
        for (pt, label) in s.points.iter().zip(&sweep_labels) {
            metrics.push(MetricsRow {
                phase: Phase::Sweep.as_str(),
                label,
                accuracy: pt.accuracy_mean,
                accuracy_std: Some(pt.accuracy_std),
                mia_rate_pre: None,
                mia_rate_post: pt.mia_mean,
                mia_rate_post_std: Some(pt.mia_std),
            });
        }
    }
    for (series, curve) in &names {
        for c in curve.iter() {
            curves.push(CurveRow {
                series,
                step: c.step,
                accuracy: c.accuracy,
                mia_rate: c.mia_rate,
                loss: c.loss,
            });
        }
    }
    write_atomic(
        &dir.join("metrics.csv"),
        &csv_bytes(
            &metrics,
            &["phase", "label", "accuracy", "accuracy_std", "mia_rate_pre", "mia_rate_post", "mia_rate_post_std"],
        )?,
    )?;
    write_atomic(
        &dir.join("curves.csv"),
        &csv_bytes(&curves, &["series", "step", "accuracy", "mia_rate", "loss"])?,
    )?;
    Ok(())
}
