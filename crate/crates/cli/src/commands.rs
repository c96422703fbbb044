use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crocodile::data::{generate_synthetic, load_csv, load_schema, save_schema, write_csv};
use crocodile::diagnostics::{
    build_conflict_sets, covariance_heatmaps, domain_expert_norms, model_diversity_index, ConflictSet, DEFAULT_LOWER_PCT,
    DEFAULT_UPPER_PCT,
};
use crocodile::harness::{ablation_csv, run_ablation, run_sweep, sweep_csv, sweep_plot, sweep_timing_csv};
use crocodile::trainer::{evaluate, model_checkpoint, restore, table_ia, train, MetricsLog, TrainOptions};
use crocodile::{Checkpoint, Dataset};

use crate::manifest::{Job, Manifest};

pub const DATA_FILE: &str = "data.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema = load_schema(&dir.join(SCHEMA_FILE)).with_context(|| format!("loading schema from {}", dir.display()))?;
    Ok(load_csv(&dir.join(DATA_FILE), &schema)?)
}

fn data_inputs(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(DATA_FILE), dir.join(SCHEMA_FILE)]
}

/// Runs `job`, writing its outputs and manifest under `out`.
pub fn execute(job: &Job, out: &Path, resume: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (inputs, outputs) = match job {
        Job::GenData { spec } => gen_data(spec, out)?,
        Job::Train { data, run, ref_checkpoint } => train_cmd(data, run, ref_checkpoint.as_deref(), out, resume)?,
        Job::Diagnose { checkpoint, data, ref_checkpoint } => diagnose(checkpoint, data, ref_checkpoint.as_deref(), out)?,
        Job::Ablate { data, grid } => {
            let ds = load_dataset(data)?;
            let results = run_ablation(grid, &ds, |r| eprintln!("cell {} done", r.cell.label()))?;
            fs::write(out.join("ablation.csv"), ablation_csv(&results))?;
            let mut timing = String::from("cell,seed,seconds\n");
            for r in &results {
                for (seed, s) in grid.seeds.iter().zip(&r.seconds) {
                    timing.push_str(&format!("{},{seed},{s:.3}\n", r.cell.label()));
                }
            }
            fs::write(out.join(TIMING_FILE), timing)?;
            (data_inputs(data), vec!["ablation.csv".into(), TIMING_FILE.into()])
        }
        Job::Sweep { data, sweep } => {
            let ds = load_dataset(data)?;
            let points = run_sweep(sweep, &ds, |p| eprintln!("{}={} {} done", p.param, p.value, p.model))?;
            fs::write(out.join("sweep.csv"), sweep_csv(&points))?;
            fs::write(out.join(TIMING_FILE), sweep_timing_csv(&points))?;
            fs::write(out.join("sweep_alpha.svg"), sweep_plot(&points, "alpha"))?;
            fs::write(out.join("sweep_tables.svg"), sweep_plot(&points, "tables"))?;
            let outputs = ["sweep.csv", TIMING_FILE, "sweep_alpha.svg", "sweep_tables.svg"];
            (data_inputs(data), outputs.iter().map(|s| s.to_string()).collect())
        }
    };
    Manifest::new(job.clone(), &inputs, out, outputs)?.write(out)
}

type Io = (Vec<PathBuf>, Vec<String>);

fn gen_data(spec: &crocodile::SyntheticSpec, out: &Path) -> Result<Io> {
    let ds = generate_synthetic(spec)?;
    write_csv(&ds, &out.join(DATA_FILE))?;
    save_schema(&ds.schema, &out.join(SCHEMA_FILE))?;
    Ok((Vec::new(), vec![DATA_FILE.into(), SCHEMA_FILE.into()]))
}

fn reference_sets(path: &Path, ds: &Dataset) -> Result<Vec<ConflictSet>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading reference checkpoint {}", path.display()))?;
    let (reference, _, _) = restore(&ckpt)?;
    if reference.schema != ds.schema {
        bail!("reference checkpoint schema does not match the dataset schema");
    }
    let norms = domain_expert_norms(&reference, ds)?;
    Ok(build_conflict_sets(&norms, DEFAULT_UPPER_PCT, DEFAULT_LOWER_PCT)?)
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train_cmd(data: &Path, run: &crocodile::RunConfig, ref_ckpt: Option<&Path>, out: &Path, resume: bool) -> Result<Io> {
    let ds = load_dataset(data)?;
    let (train_ds, test_ds) = ds.split(run.train.test_fraction, run.train.seed)?;
    let sets = ref_ckpt.map(|p| reference_sets(p, &test_ds)).transpose()?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let mut log = MetricsLog::default();
    let mut state = None;
    if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path).context("loading checkpoint to resume from")?;
        if metrics_path.exists() {
            log = MetricsLog::read_csv(&metrics_path)?;
            log.rows.retain(|r| r.step <= ckpt.step);
        }
        eprintln!("resuming after epoch {}", ckpt.epoch);
        state = Some(ckpt);
    }
    let mut timing = String::from("epoch,seconds\n");
    let mut epoch = state.as_ref().map_or(0, |c| c.epoch as usize);
    while epoch < run.train.epochs {
        let opts = TrainOptions { conflict_sets: sets.as_deref(), checkpoint: None, resume: state.as_ref(), stop_after: Some(epoch + 1) };
        let outcome = train(run, &train_ds, &test_ds, opts)?;
        epoch = outcome.epochs_done;
        log.rows.extend(outcome.log.rows);
        timing.push_str(&format!("{epoch},{:.3}\n", outcome.seconds));
        // Metrics first: on restart, rows newer than the checkpoint are dropped.
        write_atomic(&metrics_path, &log.to_csv())?;
        let ckpt = model_checkpoint(&outcome.model, run, Some(&outcome.adam), epoch, &train_ds.fingerprint())?;
        ckpt.save(&ckpt_path)?;
        if let Some(h) = log.last("all", "loss_total") {
            eprintln!("epoch {epoch}: loss {h:.6}");
        }
        state = Some(ckpt);
    }
    write_atomic(&metrics_path, &log.to_csv())?;
    fs::write(out.join(TIMING_FILE), timing)?;
    let mut inputs = data_inputs(data);
    inputs.extend(ref_ckpt.map(Path::to_path_buf));
    Ok((inputs, vec![CHECKPOINT_FILE.into(), METRICS_FILE.into(), TIMING_FILE.into()]))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn diagnose(ckpt_path: &Path, data: &Path, ref_ckpt: Option<&Path>, out: &Path) -> Result<Io> {
    let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let (model, run, _) = restore(&ckpt)?;
    let ds = load_dataset(data)?;
    if model.schema != ds.schema {
        bail!("checkpoint schema does not match the dataset schema in {}", data.display());
    }
    let (_, test_ds) = ds.split(run.train.test_fraction, run.train.seed)?;
    let mut outputs = vec!["auc.csv".to_string(), "ia.csv".to_string()];

    let report = evaluate(&model, &test_ds)?;
    let mut auc = String::from("domain,auc,gauc\n");
    for (s, (a, g)) in report.auc.iter().zip(&report.gauc).enumerate() {
        auc.push_str(&format!("{s},{},{}\n", opt(*a), opt(*g)));
    }
    auc.push_str(&format!("all,{},{}\n", opt(report.overall_auc), opt(report.overall_gauc)));
    fs::write(out.join("auc.csv"), auc)?;

    let mut ia = String::from("step,table,ia\n");
    for (p, v) in table_ia(&model)?.iter().enumerate() {
        ia.push_str(&format!("{},{p},{v:.6}\n", ckpt.step));
    }
    fs::write(out.join("ia.csv"), ia)?;

    let experts = model.evaluate_outputs(&test_ds)?.experts;
    covariance_heatmaps(&experts)?.write(out)?;
    outputs.extend(["expert_cov.csv", "dim_cov.csv", "expert_cov.svg", "dim_cov.svg"].map(String::from));

    match ref_ckpt {
        Some(path) => {
            let sets = reference_sets(path, &test_ds)?;
            let di = model_diversity_index(&model, &test_ds, &sets, DEFAULT_UPPER_PCT, DEFAULT_LOWER_PCT)?;
            let mut csv = String::from("pair_i,pair_j,size,di\n");
            for p in &di.pairs {
                csv.push_str(&format!("{},{},{},{:.6}\n", p.i, p.j, p.size, p.di));
            }
            fs::write(out.join("di.csv"), csv)?;
            outputs.push("di.csv".into());
        }
        None => eprintln!("warning: no --ref-checkpoint given; skipping diversity index"),
    }
    let mut inputs = vec![ckpt_path.to_path_buf()];
    inputs.extend(data_inputs(data));
    inputs.extend(ref_ckpt.map(Path::to_path_buf));
    Ok((inputs, outputs))
}
