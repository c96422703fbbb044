//! Mini-batch training, evaluation and checkpointing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_iter, Dataset, Schema};
use crate::diagnostics::{information_abundance, model_diversity_index, ranking_report, ConflictSet, RankingReport};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::model::{Model, ModelConfig, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::params::sub_seed;
use crate::tensor::Tensor;

/// CovLoss weight used when a Crocodile config leaves `alpha` unset.
pub const DEFAULT_ALPHA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate on the held-out split every this many epochs.
    pub eval_every: usize,
    /// Log IA (and DI, when conflict sets are given) every this many epochs.
    pub diag_every: usize,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 1,
            diag_every: 1,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.diag_every == 0 {
            return Err(Error::InvalidArgument("batch size and cadences must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to build and train one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Crocodile)
    }
}

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let mut run = Self {
            model: ModelConfig::for_variant(variant),
            train: TrainConfig::default(),
        };
        run.train.loss.alpha = default_alpha(variant);
        run
    }

    /// Parses JSON, filling `train.loss.alpha` from the variant when absent.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let has_alpha = value.pointer("/train/loss/alpha").is_some();
        let mut run: RunConfig = serde_json::from_value(value)?;
        if !has_alpha {
            run.train.loss.alpha = default_alpha(run.model.variant);
        }
        Ok(run)
    }

    /// Sets both the model and training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

pub fn default_alpha(variant: Variant) -> f64 {
    if variant == Variant::Crocodile {
        DEFAULT_ALPHA
    } else {
        0.0
    }
}

/// Rows of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub domain: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: u64, domain: impl Into<String>, metric: &str, value: f64) {
        self.rows.push(MetricRow { step, domain: domain.into(), metric: metric.into(), value });
    }

    pub fn last(&self, domain: &str, metric: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.domain == domain && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,domain,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.domain, r.metric, r.value));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e.to_string()))?;
        let mut log = Self::default();
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| csv_error(path, line, e.to_string()))?;
            if rec.len() != 4 {
                return Err(csv_error(path, line, format!("expected 4 fields, found {}", rec.len())));
            }
            let step = rec[0].parse().map_err(|_| csv_error(path, line, format!("bad step `{}`", &rec[0])))?;
            let value = rec[3].parse().map_err(|_| csv_error(path, line, format!("bad value `{}`", &rec[3])))?;
            log.push(step, &rec[1], &rec[2], value);
        }
        Ok(log)
    }
}

fn csv_error(path: &Path, line: u64, message: String) -> Error {
    Error::Csv { path: path.to_path_buf(), line, message }
}

fn push_ranking(log: &mut MetricsLog, step: u64, r: &RankingReport) {
    for (s, (a, g)) in r.auc.iter().zip(&r.gauc).enumerate() {
        if let Some(a) = a {
            log.push(step, s.to_string(), "auc", *a);
        }
        if let Some(g) = g {
            log.push(step, s.to_string(), "gauc", *g);
        }
    }
    if let Some(a) = r.overall_auc {
        log.push(step, "all", "auc", a);
    }
    if let Some(g) = r.overall_gauc {
        log.push(step, "all", "gauc", g);
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Batch-mean total loss.
    pub total: f64,
    /// Batch-mean BCE per domain; batches without the domain count as 0.
    pub bce: Vec<f64>,
    pub disentangle: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Reference conflict sets; enables DI logging.
    pub conflict_sets: Option<&'a [ConflictSet]>,
    /// Checkpoint written after every epoch.
    pub checkpoint: Option<&'a Path>,
    /// State to continue from.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    pub log: MetricsLog,
    pub history: Vec<EpochRecord>,
    pub epochs_done: usize,
    pub seconds: f64,
}

/// Serialized configuration stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub run: RunConfig,
    pub schema: Schema,
}

pub fn model_checkpoint(model: &Model, run: &RunConfig, adam: Option<&Adam>, epoch: usize, fingerprint: &str) -> Result<Checkpoint> {
    let config_json = serde_json::to_string(&SnapshotConfig { run: run.clone(), schema: model.schema.clone() })?;
    let mut tensors: Vec<(String, Tensor)> = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    if let Some(adam) = adam {
        for (p, (m, v)) in model.params.iter().zip(adam.m.iter().zip(&adam.v)) {
            tensors.push((format!("adam.m.{}", p.name), m.clone()));
            tensors.push((format!("adam.v.{}", p.name), v.clone()));
        }
    }
    Ok(Checkpoint {
        config_json,
        step: adam.map_or(0, |a| a.step),
        epoch: epoch as u64,
        fingerprint: fingerprint.to_string(),
        tensors,
    })
}

/// Rebuilds the model (and optimizer state, when stored) from a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, RunConfig, Option<Adam>)> {
    let snap: SnapshotConfig = serde_json::from_str(&ckpt.config_json)?;
    let mut model = Model::new(snap.run.model.clone(), &snap.schema)?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for (param, name) in model.params.iter_mut().zip(&names) {
        let t = ckpt
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != param.value.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), param.value.shape())));
        }
        param.value = t.clone();
    }
    let adam = if ckpt.tensor(&format!("adam.m.{}", names[0])).is_some() {
        let mut adam = Adam::new(snap.run.train.adam, &model.params);
        adam.step = ckpt.step;
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.tensor(&format!("{prefix}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))
            };
            adam.m[i] = get("adam.m")?;
            adam.v[i] = get("adam.v")?;
        }
        Some(adam)
    } else {
        None
    };
    Ok((model, snap.run, adam))
}

/// Predictions on `ds` and the resulting ranking metrics.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<RankingReport> {
    let out = model.evaluate_outputs(ds)?;
    let labels: Vec<f64> = ds.samples.iter().map(|s| s.label as f64).collect();
    let users: Vec<u32> = ds.samples.iter().map(|s| s.user_id).collect();
    let domains: Vec<usize> = ds.samples.iter().map(|s| s.domain).collect();
    Ok(ranking_report(&out.predictions, &labels, &users, &domains, ds.num_domains()))
}

/// IA of every embedding table.
pub fn table_ia(model: &Model) -> Result<Vec<f64>> {
    model.bank.tables.iter().map(|&t| information_abundance(model.params.get(t))).collect()
}

pub fn train(run: &RunConfig, train_ds: &Dataset, test_ds: &Dataset, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    run.train.validate()?;
    let started = Instant::now();
    let cfg = &run.train;
    let s_count = train_ds.num_domains();
    if let Some(empty) = train_ds.domain_counts().iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("training split has no samples of domain {empty}")));
    }
    let fingerprint = train_ds.fingerprint();

    let (mut model, mut adam, start_epoch) = match opts.resume {
        Some(ckpt) => {
            if ckpt.fingerprint != fingerprint {
                return Err(Error::Checkpoint("checkpoint was trained on a different dataset".into()));
            }
            let (model, saved, adam) = restore(ckpt)?;
            if saved != *run {
                return Err(Error::Checkpoint("checkpoint config differs from the requested run".into()));
            }
            let adam = adam.ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
            (model, adam, ckpt.epoch as usize)
        }
        None => {
            let model = Model::new(run.model.clone(), &train_ds.schema)?;
            let adam = Adam::new(cfg.adam, &model.params);
            (model, adam, 0)
        }
    };

    let mut log = MetricsLog::default();
    let mut history = Vec::new();
    let end_epoch = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut epoch = start_epoch;
    while epoch < end_epoch {
        let mut sum_total = 0.0;
        let mut sum_dis = 0.0;
        let mut sum_bce = vec![0.0; s_count];
        let mut batches = 0usize;
        for batch in batch_iter(train_ds, cfg.batch_size, Some(sub_seed(cfg.seed, 1_000 + epoch as u64)))? {
            let step = adam.step;
            let mut pass = model.forward(&batch, true)?;
            let (loss, report) = total_loss(&mut pass, &batch, &cfg.loss, s_count, sub_seed(cfg.seed, 1 << 32 | step))?;
            if !report.total.is_finite() {
                return Err(Error::Divergence { step: step as usize, reason: format!("loss {}", report.total) });
            }
            let mut grads = pass.tape.backward(loss)?;
            let grads: Vec<Tensor> = pass
                .vars
                .iter()
                .map(|&v| grads.take(v).expect("parameters require grad"))
                .collect();
            adam.update(&mut model.params, &grads)?;

            sum_total += report.total;
            sum_dis += report.disentangle;
            for (acc, b) in sum_bce.iter_mut().zip(&report.bce) {
                *acc += b.unwrap_or(0.0);
            }
            batches += 1;
        }
        epoch += 1;
        let step = adam.step;
        let nb = batches as f64;
        let record = EpochRecord {
            epoch,
            step,
            total: sum_total / nb,
            bce: sum_bce.iter().map(|v| v / nb).collect(),
            disentangle: sum_dis / nb,
        };
        for (s, b) in record.bce.iter().enumerate() {
            log.push(step, s.to_string(), "bce", *b);
        }
        log.push(step, "all", "disentangle", record.disentangle);
        log.push(step, "all", "loss_total", record.total);
        history.push(record);

        let last = epoch == cfg.epochs;
        if epoch % cfg.eval_every == 0 || last {
            push_ranking(&mut log, step, &evaluate(&model, test_ds)?);
        }
        if epoch % cfg.diag_every == 0 || last {
            for (p, ia) in table_ia(&model)?.into_iter().enumerate() {
                log.push(step, format!("table{p}"), "ia", ia);
            }
            if let Some(sets) = opts.conflict_sets {
                let di = model_diversity_index(&model, test_ds, sets, crate::diagnostics::DEFAULT_UPPER_PCT, crate::diagnostics::DEFAULT_LOWER_PCT)?;
                if let Some(avg) = di.average {
                    log.push(step, "all", "di", avg);
                }
            }
        }
        if let Some(path) = opts.checkpoint {
            model_checkpoint(&model, run, Some(&adam), epoch, &fingerprint)?.save(path)?;
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        log,
        history,
        epochs_done: epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            domain_sizes: vec![240, 160, 80],
            num_users: 40,
            num_items: 60,
            seed: 3,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().split(0.25, 1).unwrap()
    }

    fn tiny_run(variant: Variant) -> RunConfig {
        let mut run = RunConfig::for_variant(variant).with_seed(5);
        run.model.num_tables = 2;
        run.model.expert_hidden = vec![8];
        run.model.tower_hidden = vec![4];
        run.model.expert_dim = 4;
        run.model.embed_dim = 4;
        run.train.epochs = 3;
        run.train.batch_size = 64;
        run.train.adam.lr = 1e-2;
        run
    }

    #[test]
    fn alpha_defaults_follow_variant() {
        assert_eq!(RunConfig::for_variant(Variant::Crocodile).train.loss.alpha, 1e-4);
        assert_eq!(RunConfig::for_variant(Variant::MeMmoe).train.loss.alpha, 0.0);
        let run = RunConfig::from_json(r#"{"model":{"variant":"crocodile"}}"#).unwrap();
        assert_eq!(run.train.loss.alpha, 1e-4);
        let run = RunConfig::from_json(r#"{"model":{"variant":"crocodile"},"train":{"loss":{"alpha":0.5}}}"#).unwrap();
        assert_eq!(run.train.loss.alpha, 0.5);
        assert!(RunConfig::from_json(r#"{"model":{"colour":1}}"#).is_err());
    }

    #[test]
    fn loss_decreases_and_accounting_adds_up() {
        let (tr, te) = tiny();
        let out = train(&tiny_run(Variant::Crocodile), &tr, &te, TrainOptions::default()).unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        assert!(last.total < first.total, "{} -> {}", first.total, last.total);
        for r in &out.history {
            let sum = r.bce.iter().sum::<f64>() + 1e-4 * r.disentangle;
            assert!((sum - r.total).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (tr, te) = tiny();
        let a = train(&tiny_run(Variant::Sdem), &tr, &te, TrainOptions::default()).unwrap();
        let b = train(&tiny_run(Variant::Sdem), &tr, &te, TrainOptions::default()).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn zero_alpha_matches_plain_bce() {
        let (tr, te) = tiny();
        let mut base = tiny_run(Variant::Crocodile);
        base.train.loss.alpha = 0.0;
        let out = train(&base, &tr, &te, TrainOptions::default()).unwrap();
        for r in &out.history {
            assert!((r.total - r.bce.iter().sum::<f64>()).abs() < 1e-12);
            assert!(r.disentangle > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (tr, te) = tiny();
        let run = tiny_run(Variant::MeMmoe);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let full = train(&run, &tr, &te, TrainOptions::default()).unwrap();

        let part = train(&run, &tr, &te, TrainOptions { checkpoint: Some(&path), stop_after: Some(2), ..Default::default() }).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.epoch, 2);
        let (restored, _, _) = restore(&ckpt).unwrap();
        assert_eq!(
            restored.evaluate_outputs(&te).unwrap().predictions,
            part.model.evaluate_outputs(&te).unwrap().predictions
        );

        let resumed = train(&run, &tr, &te, TrainOptions { resume: Some(&ckpt), ..Default::default() }).unwrap();
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.epochs_done, 3);
    }

    #[test]
    fn resume_rejects_other_data() {
        let (tr, te) = tiny();
        let run = tiny_run(Variant::Mmoe);
        let model = Model::new(run.model.clone(), &tr.schema).unwrap();
        let ckpt = model_checkpoint(&model, &run, Some(&Adam::new(run.train.adam, &model.params)), 1, "other").unwrap();
        let err = train(&run, &tr, &te, TrainOptions { resume: Some(&ckpt), ..Default::default() }).unwrap_err();
        assert!(err.to_string().contains("different dataset"));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let mut log = MetricsLog::default();
        log.push(3, "0", "bce", 0.1 + 0.2);
        log.push(3, "all", "auc", 1.0 / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(MetricsLog::read_csv(&p).unwrap(), log);
        std::fs::write(&p, "step,domain,metric,value
x,0,bce,1
").unwrap();
        assert!(matches!(MetricsLog::read_csv(&p), Err(Error::Csv { line: 2, .. })));
    }
}
