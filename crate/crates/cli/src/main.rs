use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgcv_core::experiment::{
    apply_env_overrides, parse_config, run_pipeline_with, RunOptions, RunOutput, SweepSpec,
};
use fedgcv_core::graph::save_dataset;
use fedgcv_core::synthetic::{generate, SyntheticSpec};
use fedgcv_core::{AblationVariant, Error, ExperimentConfig, Phase};

#[derive(Parser)]
#[command(name = "fedgcv", version, about = "Federated graph unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config and FEDGCV_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long)]
    seed: Option<u64>,
    /// Ignore existing checkpoints.
    #[arg(long)]
    fresh: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline phases in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of train,unlearn,repair,retrain,ablation,sweep.
        #[arg(long, default_value = "train,unlearn,repair")]
        phases: String,
    },
    /// Sensitivity sweep of one unlearning or repair parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds per value.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run one ablation variant end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// full, no_gru or no_virtual.
        #[arg(long)]
        variant: String,
    },
    /// Write a synthetic citation-style dataset as JSON.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Node count; the Cora-sized default when absent.
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long, default_value_t = 2025)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config(&common.config)?;
    apply_env_overrides(&mut cfg);
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig, phases: &[Phase], fresh: bool) -> Result<RunOutput, Error> {
    run_pipeline_with(cfg, phases, RunOptions { resume: !fresh })
}

fn print_summary(out: &RunOutput) {
    for r in &out.report.phases {
        for m in &r.metrics {
            println!(
                "{:<20} accuracy {:6.2}%  mia {:6.2}% (pre {:6.2}%)",
                m.label,
                100.0 * m.accuracy,
                100.0 * m.mia_rate_post,
                100.0 * m.mia_rate_pre
            );
        }
    }
    if let Some(s) = &out.report.sweep {
        for p in &s.points {
            println!(
                "{}={:<10} accuracy {:6.2}% ± {:.2}  mia {:6.2}% ± {:.2}",
                s.param,
                p.value,
                100.0 * p.accuracy_mean,
                100.0 * p.accuracy_std,
                100.0 * p.mia_mean,
                100.0 * p.mia_std
            );
        }
    }
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    println!("results written to {}", out.report.config.output.display());
}

fn execute(cli: Cli) -> Result<(), Error> {
    let out = match cli.command {
        Command::Run { common, phases } => {
            let cfg = load(&common)?;
            run(&cfg, &Phase::parse_list(&phases)?, common.fresh)?
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let mut cfg = load(&common)?;
            let seeds = seeds.or(cfg.sweep.as_ref().map(|s| s.seeds)).unwrap_or(3);
            cfg.sweep = Some(SweepSpec { param, values, seeds });
            cfg.validate()?;
            run(&cfg, &[Phase::Sweep], common.fresh)?
        }
        Command::Ablate { common, variant } => {
            let mut cfg = load(&common)?;
            cfg.variant = AblationVariant::parse(&variant)?;
            run(&cfg, &[Phase::Train, Phase::Unlearn, Phase::Repair], common.fresh)?
        }
        Command::Synth { out, nodes, seed } => {
            let mut spec = match nodes {
                Some(n) => SyntheticSpec::tiny(n, seed),
                None => SyntheticSpec::cora_like(),
            };
            spec.seed = seed;
            save_dataset(&generate(&spec)?, &out)?;
            println!("wrote {}", out.display());
            return Ok(());
        }
    };
    print_summary(&out);
    Ok(())
}

fn init_threads() -> Result<(), Error> {
    let Some(raw) = std::env::var_os("FEDGCV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config {
            key: "FEDGCV_THREADS".into(),
            reason: format!("expected a positive integer, got {raw:?}"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config {
            key: "FEDGCV_THREADS".into(),
            reason: e.to_string(),
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
