//! End-to-end experiment orchestration: training, unlearning, repair, the
//! retrain baseline, ablations and parameter sweeps, with checkpoints and
//! deterministic reports.

mod config;
mod report;

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{
    apply_env_overrides, parse_config, parse_config_str, AblationVariant, ExperimentConfig, PartitionConfig, SweepSpec,
    SWEEPABLE,
};
pub use report::{
    emit_results, mean_std, write_atomic, CurvePoint, MetricsReport, PhaseResult, ResultsReport, SweepPoint,
    SweepReport, SweepRun, REPORT_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::evaluation::{fit_threshold, global_accuracy, mia_rate, retrain_oracle, MiaSets, MiaThreshold, Split};
use crate::federation::{run_federated, RoundRecord, ServerState};
use crate::graph::{induce_shards, load_dataset, load_partition, partition_graph, ClientShard, Dataset};
use crate::nn::{read_params, write_params, GcnParams, GcnShape, ParamVector};
use crate::synthetic;
use crate::unlearning::{run_unlearning, UnlearnRecord};
use crate::virtual_client::{build_virtual_client, run_repair, save_virtual, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Unlearn,
    Repair,
    Retrain,
    Ablation,
    Sweep,
}

impl Phase {
    pub const ALL: [Phase; 6] = [Phase::Train, Phase::Unlearn, Phase::Repair, Phase::Retrain, Phase::Ablation, Phase::Sweep];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Unlearn => "unlearn",
            Phase::Repair => "repair",
            Phase::Retrain => "retrain",
            Phase::Ablation => "ablation",
            Phase::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config("phases", format!("unknown phase `{s}`")))
    }

    /// Parses a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(Self::parse).collect()
    }

    fn requires(self) -> Option<Phase> {
        match self {
            Phase::Unlearn | Phase::Retrain | Phase::Ablation => Some(Phase::Train),
            Phase::Repair => Some(Phase::Unlearn),
            Phase::Train | Phase::Sweep => None,
        }
    }
}

/// A loaded dataset with its client shards.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub assignment: Vec<usize>,
    pub shards: Vec<ClientShard>,
}

impl Context {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let dataset = match (&cfg.dataset, &cfg.synthetic) {
            (Some(path), _) => load_dataset(path)?,
            (None, Some(spec)) => synthetic::generate(spec)?,
            (None, None) => return Err(Error::config("dataset", "no dataset configured")),
        };
        Self::from_dataset(cfg, dataset)
    }

    pub fn from_dataset(cfg: &ExperimentConfig, mut dataset: Dataset) -> Result<Self> {
        if cfg.normalize_features {
            dataset.row_normalize_features();
        }
        let k = cfg.federation.clients;
        let assignment = match &cfg.partition.file {
            Some(path) => load_partition(path, dataset.num_nodes(), k)?,
            None => partition_graph(&dataset.graph, k, cfg.partition.seed)?,
        };
        let shards = induce_shards(&dataset, &assignment)?;
        if shards.len() != k {
            return Err(Error::Partition(format!("expected {k} non-empty clients, got {}", shards.len())));
        }
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            assignment,
            shards,
        })
    }

    pub fn shape(&self) -> GcnShape {
        GcnShape::new(self.dataset.num_features(), self.cfg.federation.hidden, self.dataset.num_classes)
    }

    pub fn target(&self) -> &ClientShard {
        self.shards
            .iter()
            .find(|s| s.client_id == self.cfg.target)
            .expect("target validated against client count")
    }

    pub fn retained(&self) -> impl Iterator<Item = &ClientShard> {
        let t = self.cfg.target;
        self.shards.iter().filter(move |s| s.client_id != t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    #[serde(skip)]
    pub global: ParamVector,
    pub history: Vec<RoundRecord>,
    pub warnings: Vec<String>,
    pub threshold: MiaThreshold,
    pub sets: MiaSets,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnOutcome {
    #[serde(skip)]
    pub theta: ParamVector,
    pub log: Vec<UnlearnRecord>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairOutcome {
    #[serde(skip)]
    pub theta: ParamVector,
    pub history: Vec<RoundRecord>,
    pub provenance: Option<Provenance>,
    /// The hosted virtual client; not checkpointed.
    #[serde(skip)]
    pub virtual_shard: Option<ClientShard>,
    pub metrics: MetricsReport,
}

fn fed_curve(history: &[RoundRecord]) -> Vec<CurvePoint> {
    history
        .iter()
        .map(|r| CurvePoint {
            step: r.round,
            accuracy: Some(r.test_acc).filter(|a| a.is_finite()),
            mia_rate: None,
            loss: None,
        })
        .collect()
}

fn params(shape: GcnShape, v: &ParamVector) -> Result<GcnParams> {
    GcnParams::unflatten(shape, v)
}

/// Trains the global model and fits the frozen MIA threshold on it.
pub fn train(ctx: &Context) -> Result<TrainOutcome> {
    let state = run_federated(ctx.shards.clone(), &ctx.cfg.federation)?;
    train_outcome(ctx, state.global, state.history, state.warnings)
}

fn train_outcome(ctx: &Context, global: ParamVector, history: Vec<RoundRecord>, warnings: Vec<String>) -> Result<TrainOutcome> {
    let p = params(ctx.shape(), &global)?;
    let sets = MiaSets::new(&ctx.shards, ctx.cfg.target)?;
    let members = sets.member_losses(&p, &ctx.shards)?;
    let threshold = fit_threshold(&members, &sets.nonmember_losses(&p, &ctx.shards)?)?;
    let rate = mia_rate(&members, &threshold);
    let metrics = MetricsReport {
        label: "pre".into(),
        accuracy: global_accuracy(&p, &ctx.shards, Split::Test)?,
        mia_rate_pre: rate,
        mia_rate_post: rate,
        curve: fed_curve(&history),
    };
    Ok(TrainOutcome {
        global,
        history,
        warnings,
        threshold,
        sets,
        metrics,
    })
}

/// Unlearns the target starting from the trained global.
pub fn unlearn(ctx: &Context, trained: &TrainOutcome, variant: AblationVariant) -> Result<UnlearnOutcome> {
    let mut ucfg = ctx.cfg.unlearn.clone();
    if variant == AblationVariant::NoGru {
        ucfg.gradient_correction = false;
    }
    let shape = ctx.shape();
    let fed = ServerState::new(ctx.shards.clone(), shape, trained.global.clone(), ctx.cfg.federation.weight_rule)?;
    let (state, log) = run_unlearning(&fed, ctx.cfg.target, trained.threshold.clone(), &ucfg, &ctx.cfg.federation.local)?;
    let p = params(shape, &state.theta)?;
    let members = trained.sets.member_losses(&p, &ctx.shards)?;
    let curve = log
        .iter()
        .map(|r| CurvePoint {
            step: r.epoch,
            accuracy: r.retain_acc,
            mia_rate: Some(r.mia_rate),
            loss: Some(r.target_ce),
        })
        .collect();
    Ok(UnlearnOutcome {
        metrics: MetricsReport {
            label: "post_unlearn".into(),
            accuracy: global_accuracy(&p, ctx.retained(), Split::Test)?,
            mia_rate_pre: trained.metrics.mia_rate_pre,
            mia_rate_post: mia_rate(&members, &trained.threshold),
            curve,
        },
        theta: state.theta,
        log,
    })
}

/// Repair rounds with the virtual client; `NoVirtual` skips them.
pub fn repair(ctx: &Context, trained: &TrainOutcome, unlearned: &UnlearnOutcome, variant: AblationVariant) -> Result<RepairOutcome> {
    let shape = ctx.shape();
    let retained: Vec<ClientShard> = ctx.retained().cloned().collect();
    let rounds = match variant {
        AblationVariant::NoVirtual => 0,
        _ => ctx.cfg.virtual_client.repair_rounds,
    };
    let (virtual_shard, provenance) = if rounds > 0 {
        let (hosted, upload) = build_virtual_client(ctx.target(), &ctx.cfg.virtual_client, &params(shape, &trained.global)?)?;
        (Some(hosted), Some(upload.synth.provenance))
    } else {
        (None, None)
    };
    let state = run_repair(
        retained,
        virtual_shard.clone(),
        unlearned.theta.clone(),
        &ctx.cfg.federation,
        ctx.cfg.federation.rounds,
        rounds,
    )?;
    let p = params(shape, &state.global)?;
    let members = trained.sets.member_losses(&p, &ctx.shards)?;
    Ok(RepairOutcome {
        metrics: MetricsReport {
            label: "post_repair".into(),
            accuracy: global_accuracy(&p, ctx.retained(), Split::Test)?,
            mia_rate_pre: trained.metrics.mia_rate_pre,
            mia_rate_post: mia_rate(&members, &trained.threshold),
            curve: fed_curve(&state.history),
        },
        theta: state.global,
        history: state.history,
        provenance,
        virtual_shard,
    })
}

/// Fresh federated training without the target client.
pub fn retrain(ctx: &Context, trained: &TrainOutcome) -> Result<MetricsReport> {
    let state = retrain_oracle(&ctx.shards, &ctx.cfg.federation, ctx.cfg.target)?;
    let p = params(ctx.shape(), &state.global)?;
    let members = trained.sets.member_losses(&p, &ctx.shards)?;
    Ok(MetricsReport {
        label: "retrain".into(),
        accuracy: global_accuracy(&p, ctx.retained(), Split::Test)?,
        mia_rate_pre: trained.metrics.mia_rate_pre,
        mia_rate_post: mia_rate(&members, &trained.threshold),
        curve: fed_curve(&state.history),
    })
}

/// Final metrics of the full pipeline with one component removed.
pub fn ablation_metrics(ctx: &Context, trained: &TrainOutcome, variant: AblationVariant) -> Result<MetricsReport> {
    let u = unlearn(ctx, trained, variant)?;
    let r = repair(ctx, trained, &u, variant)?;
    let mut m = r.metrics;
    m.label = format!("ablation_{}", variant.as_str());
    Ok(m)
}

/// Trains on `ds` under `cfg` and reports the named variant's final metrics.
pub fn run_ablation(ds: Dataset, cfg: &ExperimentConfig, variant: AblationVariant) -> Result<MetricsReport> {
    let ctx = Context::from_dataset(cfg, ds)?;
    let trained = train(&ctx)?;
    ablation_metrics(&ctx, &trained, variant)
}

/// Runs the configured sweep: `seeds` trainings, each shared by every value.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "the sweep phase needs a `sweep` section"))?;
    let base = cfg.base_seed();
    let seeds: Vec<u64> = (0..spec.seeds as u64).map(|i| base + i).collect();
    let per_seed: Vec<Vec<SweepRun>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut seeded = cfg.clone();
            seeded.set_seed(seed);
            let ctx = Context::prepare(&seeded)?;
            let trained = train(&ctx)?;
            spec.values
                .par_iter()
                .map(|&value| {
                    let mut c = ctx.clone();
                    c.cfg.apply_param(&spec.param, value)?;
                    let u = unlearn(&c, &trained, c.cfg.variant)?;
                    let r = repair(&c, &trained, &u, c.cfg.variant)?;
                    let mut curve = u.metrics.curve.clone();
                    curve.extend(r.metrics.curve.iter().cloned());
                    Ok(SweepRun {
                        seed,
                        accuracy: r.metrics.accuracy,
                        mia_rate: r.metrics.mia_rate_post,
                        curve,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let points = spec
        .values
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let runs: Vec<SweepRun> = per_seed.iter().map(|runs| runs[k].clone()).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (mia_mean, mia_std) = mean_std(&runs.iter().map(|r| r.mia_rate).collect::<Vec<_>>());
            SweepPoint {
                value,
                accuracy_mean,
                accuracy_std,
                mia_mean,
                mia_std,
                runs,
            }
        })
        .collect();
    Ok(SweepReport {
        param: spec.param.clone(),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Reuse checkpoints written by an earlier run with the same config.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: true }
    }
}

/// Result of [`run_pipeline`]: the report plus wall-clock seconds per phase.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ResultsReport,
    pub timing: Vec<(Phase, f64)>,
}

struct Checkpoints {
    dir: PathBuf,
    active: bool,
}

impl Checkpoints {
    fn open(out: &Path, cfg: &ExperimentConfig, resume: bool) -> Result<Self> {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        let snapshot = serde_json::to_vec_pretty(cfg)?;
        let config_path = dir.join("config.json");
        let matches = fs::read(&config_path).map(|b| b == snapshot).unwrap_or(false);
        if !matches {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_file() {
                    fs::remove_file(path)?;
                }
            }
            write_atomic(&config_path, &snapshot)?;
        }
        Ok(Self {
            dir,
            active: resume && matches,
        })
    }

    fn json_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.json"))
    }

    fn bin_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.bin"))
    }

    fn exists(&self, name: &str) -> bool {
        self.active && self.json_path(name).is_file()
    }

    fn load<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        if !self.exists(name) {
            return Ok(None);
        }
        let f = fs::File::open(self.json_path(name))?;
        Ok(Some(serde_json::from_reader(BufReader::new(f))?))
    }

    fn load_params(&self, name: &str, shape: GcnShape) -> Result<Option<ParamVector>> {
        let path = self.bin_path(name);
        if !self.active || !path.is_file() {
            return Ok(None);
        }
        let (stored, v) = read_params(&mut BufReader::new(fs::File::open(path)?))?;
        if stored != shape {
            return Ok(None);
        }
        Ok(Some(v))
    }

    fn save<T: Serialize>(&self, name: &str, value: &T, theta: Option<(GcnShape, &ParamVector)>) -> Result<()> {
        if let Some((shape, v)) = theta {
            let mut buf = Vec::new();
            write_params(&mut BufWriter::new(&mut buf), shape, v)?;
            write_atomic(&self.bin_path(name), &buf)?;
        }
        // The JSON file marks the checkpoint complete, so it goes last.
        write_atomic(&self.json_path(name), &serde_json::to_vec_pretty(value)?)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    ckpt: Checkpoints,
    ctx: Option<Context>,
    trained: Option<TrainOutcome>,
    unlearned: HashMap<bool, UnlearnOutcome>,
}

fn unlearn_key(variant: AblationVariant) -> (bool, &'static str) {
    match variant {
        AblationVariant::NoGru => (false, "unlearn_no_gru"),
        _ => (true, "unlearn"),
    }
}

impl<'a> Runner<'a> {
    fn ctx(&mut self) -> Result<&Context> {
        if self.ctx.is_none() {
            self.ctx = Some(Context::prepare(self.cfg)?);
        }
        Ok(self.ctx.as_ref().expect("just set"))
    }

    fn trained(&mut self) -> Result<TrainOutcome> {
        if let Some(t) = &self.trained {
            return Ok(t.clone());
        }
        let shape = self.ctx()?.shape();
        let loaded = match (self.ckpt.load::<TrainOutcome>("train")?, self.ckpt.load_params("train", shape)?) {
            (Some(mut t), Some(g)) => {
                t.global = g;
                Some(t)
            }
            _ => None,
        };
        let t = match loaded {
            Some(t) => t,
            None => {
                let t = train(self.ctx()?)?;
                self.ckpt.save("train", &t, Some((shape, &t.global)))?;
                t
            }
        };
        self.trained = Some(t.clone());
        Ok(t)
    }

    fn unlearned(&mut self, variant: AblationVariant) -> Result<UnlearnOutcome> {
        let (key, name) = unlearn_key(variant);
        if let Some(u) = self.unlearned.get(&key) {
            return Ok(u.clone());
        }
        let trained = self.trained()?;
        let shape = self.ctx()?.shape();
        let loaded = match (self.ckpt.load::<UnlearnOutcome>(name)?, self.ckpt.load_params(name, shape)?) {
            (Some(mut u), Some(theta)) => {
                u.theta = theta;
                Some(u)
            }
            _ => None,
        };
        let u = match loaded {
            Some(u) => u,
            None => {
                let u = unlearn(self.ctx()?, &trained, variant)?;
                self.ckpt.save(name, &u, Some((shape, &u.theta)))?;
                u
            }
        };
        self.unlearned.insert(key, u.clone());
        Ok(u)
    }

    fn repaired(&mut self, variant: AblationVariant) -> Result<RepairOutcome> {
        let name = format!("repair_{}", variant.as_str());
        let shape = self.ctx()?.shape();
        if let (Some(mut r), Some(theta)) = (self.ckpt.load::<RepairOutcome>(&name)?, self.ckpt.load_params(&name, shape)?) {
            r.theta = theta;
            return Ok(r);
        }
        let trained = self.trained()?;
        let u = self.unlearned(variant)?;
        let r = repair(self.ctx()?, &trained, &u, variant)?;
        self.ckpt.save(&name, &r, Some((shape, &r.theta)))?;
        Ok(r)
    }

    fn cached_metrics(&mut self, name: &str, compute: impl FnOnce(&mut Self) -> Result<Vec<MetricsReport>>) -> Result<Vec<MetricsReport>> {
        if let Some(m) = self.ckpt.load::<Vec<MetricsReport>>(name)? {
            return Ok(m);
        }
        let m = compute(self)?;
        self.ckpt.save(name, &m, None)?;
        Ok(m)
    }

    fn has_checkpoint(&self, phase: Phase) -> bool {
        match phase {
            Phase::Train => self.ckpt.exists("train"),
            Phase::Unlearn => self.ckpt.exists(unlearn_key(self.cfg.variant).1),
            _ => false,
        }
    }
}

/// Runs `phases` in canonical order, writing checkpoints under
/// `<output>/checkpoints` and the results via [`emit_results`].
pub fn run_pipeline(cfg: &ExperimentConfig, phases: &[Phase]) -> Result<RunOutput> {
    run_pipeline_with(cfg, phases, RunOptions::default())
}

pub fn run_pipeline_with(cfg: &ExperimentConfig, phases: &[Phase], opts: RunOptions) -> Result<RunOutput> {
    if phases.is_empty() {
        return Err(Error::config("phases", "at least one phase is required"));
    }
    cfg.validate()?;
    let mut ordered = phases.to_vec();
    ordered.sort();
    ordered.dedup();

    let out = cfg.output.clone();
    let mut runner = Runner {
        cfg,
        ckpt: Checkpoints::open(&out, cfg, opts.resume)?,
        ctx: None,
        trained: None,
        unlearned: HashMap::new(),
    };
    for &p in &ordered {
        let mut need = p.requires();
        while let Some(r) = need {
            if !ordered.contains(&r) && !runner.has_checkpoint(r) {
                return Err(Error::PhaseDependency {
                    phase: p.as_str().into(),
                    requires: r.as_str().into(),
                });
            }
            need = r.requires();
        }
    }

    let mut results = Vec::new();
    let mut timing = Vec::new();
    let mut sweep_report = None;
    let variant = cfg.variant;
    for &phase in &ordered {
        let start = Instant::now();
        let run = |runner: &mut Runner| -> Result<Vec<MetricsReport>> {
            match phase {
                Phase::Train => Ok(vec![runner.trained()?.metrics]),
                Phase::Unlearn => Ok(vec![runner.unlearned(variant)?.metrics]),
                Phase::Repair => {
                    let r = runner.repaired(variant)?;
                    if let (Some(shard), Some(prov)) = (&r.virtual_shard, &r.provenance) {
                        save_virtual(shard, prov, out.join("virtual_client.json"))?;
                    }
                    Ok(vec![r.metrics])
                }
                Phase::Retrain => runner.cached_metrics("retrain", |r| {
                    let trained = r.trained()?;
                    Ok(vec![retrain(r.ctx()?, &trained)?])
                }),
                Phase::Ablation => runner.cached_metrics("ablation", |r| {
                    AblationVariant::ALL
                        .into_iter()
                        .map(|v| {
                            let mut m = r.repaired(v)?.metrics;
                            m.label = format!("ablation_{}", v.as_str());
                            Ok(m)
                        })
                        .collect()
                }),
                Phase::Sweep => Ok(Vec::new()),
            }
        };
        let metrics = run(&mut runner).map_err(|e| e.in_phase(phase.as_str()))?;
        if phase == Phase::Sweep {
            let s = match runner.ckpt.load::<SweepReport>("sweep")? {
                Some(s) => s,
                None => {
                    let s = sweep(cfg).map_err(|e| e.in_phase("sweep"))?;
                    runner.ckpt.save("sweep", &s, None)?;
                    s
                }
            };
            sweep_report = Some(s);
        } else {
            results.push(PhaseResult { phase, metrics });
        }
        timing.push((phase, start.elapsed().as_secs_f64()));
    }

    let report = ResultsReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        threshold: runner.trained.as_ref().map(|t| t.threshold.clone()),
        phases: results,
        sweep: sweep_report,
        warnings: runner.trained.as_ref().map(|t| t.warnings.clone()).unwrap_or_default(),
    };
    emit_results(&report, &out)?;
    let timing_json: Vec<serde_json::Value> = timing
        .iter()
        .map(|(p, s)| serde_json::json!({"phase": p.as_str(), "seconds": s}))
        .collect();
    write_atomic(&out.join("timing.json"), &serde_json::to_vec_pretty(&timing_json)?)?;
    Ok(RunOutput { report, timing })
}
