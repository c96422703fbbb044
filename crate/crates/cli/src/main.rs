//! `crocodile` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crocodile::data::SyntheticSpec;
use crocodile::harness::{AblationGrid, SweepSpec};
use crocodile::{RunConfig, Variant};

use manifest::{Job, Manifest};

const SEED_ENV: &str = "CROC_SEED";

#[derive(Debug, Parser)]
#[command(name = "crocodile", version, about = "Multi-domain CTR models with multi-embedding experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    GenData {
        /// JSON generator spec; defaults are used for missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model variant.
    Train(TrainArgs),
    /// Write ranking metrics, IA, DI and covariance heatmaps of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Domain-bound reference model defining the conflict sets.
        #[arg(long)]
        ref_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the component ablation grid.
    Ablate(HarnessArgs),
    /// Sweep the CovLoss weight and the number of tables.
    Sweep(HarnessArgs),
    /// Repeat the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Log DI against this reference model during training.
    #[arg(long)]
    ref_checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint in --out when one exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct HarnessArgs {
    /// JSON grid file; defaults are used for missing keys.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
}

/// Bad input the user can fix by changing the invocation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn read_json(path: Option<&Path>) -> Result<Value> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Value::Object(Default::default())),
    }
}

fn gen_data_job(spec: Option<&Path>, seed: Option<u64>) -> Result<Job> {
    let value = read_json(spec)?;
    let file_seed = value.get("seed").is_some();
    let mut spec: SyntheticSpec = serde_json::from_value(value).context("invalid generator spec")?;
    if let Some(s) = seed.or(if file_seed { None } else { env_seed()? }) {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(Job::GenData { spec })
}

fn train_job(a: &TrainArgs) -> Result<Job> {
    let mut value = read_json(a.config.as_deref())?;
    if let Some(v) = a.variant {
        let obj = value.as_object_mut().context("run config must be a JSON object")?;
        let model = obj.entry("model").or_insert_with(|| Value::Object(Default::default()));
        model
            .as_object_mut()
            .context("`model` must be a JSON object")?
            .insert("variant".into(), serde_json::to_value(v)?);
    }
    let file_seed = value.pointer("/model/seed").is_some() || value.pointer("/train/seed").is_some();
    let mut run = RunConfig::from_json(&value.to_string()).context("invalid run config")?;
    if let Some(s) = a.seed.or(if file_seed { None } else { env_seed()? }) {
        run = run.with_seed(s);
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(alpha) = a.alpha {
        run.train.loss.alpha = alpha;
    }
    if let Some(lr) = a.lr {
        run.train.adam.lr = lr;
    }
    if a.init_scale.is_some() {
        run.model.init_scale = a.init_scale;
    }
    run.train.validate()?;
    Ok(Job::Train { data: a.data.clone(), run, ref_checkpoint: a.ref_checkpoint.clone() })
}

fn apply_harness_flags(a: &HarnessArgs, seeds: &mut Vec<u64>, config: &mut RunConfig) {
    if let Some(s) = &a.seeds {
        *seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if a.init_scale.is_some() {
        config.model.init_scale = a.init_scale;
    }
}

fn ablate_job(a: &HarnessArgs) -> Result<Job> {
    let mut grid: AblationGrid = serde_json::from_value(read_json(a.grid.as_deref())?).context("invalid ablation grid")?;
    apply_harness_flags(a, &mut grid.seeds, &mut grid.config);
    Ok(Job::Ablate { data: a.data.clone(), grid })
}

fn sweep_job(a: &HarnessArgs) -> Result<Job> {
    let mut sweep: SweepSpec = serde_json::from_value(read_json(a.grid.as_deref())?).context("invalid sweep grid")?;
    apply_harness_flags(a, &mut sweep.seeds, &mut sweep.config);
    Ok(Job::Sweep { data: a.data.clone(), sweep })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => commands::execute(&gen_data_job(spec.as_deref(), seed)?, &out, false),
        Command::Train(a) => commands::execute(&train_job(&a)?, &a.out, a.resume),
        Command::Diagnose { checkpoint, data, ref_checkpoint, out } => {
            commands::execute(&Job::Diagnose { checkpoint, data, ref_checkpoint }, &out, false)
        }
        Command::Ablate(a) => commands::execute(&ablate_job(&a)?, &a.out, false),
        Command::Sweep(a) => commands::execute(&sweep_job(&a)?, &a.out, false),
        Command::Rerun { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            m.check_inputs()?;
            commands::execute(&m.job, out.as_deref().unwrap_or(&m.out_dir), false)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
