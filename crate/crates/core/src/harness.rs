//! Component ablation grid and hyper-parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::svg;
use crate::error::{Error, Result};
use crate::model::{GateKind, Variant};
use crate::stats::{mean, paired_t_test, std_dev};
use crate::trainer::{evaluate, train, RunConfig, TrainOptions, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedding {
    Se,
    Me,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "b")]
    Bce,
    #[serde(rename = "b+c")]
    BceCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub embedding: Embedding,
    pub gate: GateKind,
    pub loss: LossKind,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            match self.embedding {
                Embedding::Se => "SE",
                Embedding::Me => "ME",
            },
            self.gate.label(),
            match self.loss {
                LossKind::Bce => "B",
                LossKind::BceCov => "B+C",
            }
        )
    }

    /// Run config for this cell on top of `template`.
    pub fn run_config(&self, template: &RunConfig, alpha: f64) -> RunConfig {
        let mut run = template.clone();
        let full = self.embedding == Embedding::Me && self.gate == GateKind::Peg && self.loss == LossKind::BceCov;
        run.model.variant = match (self.embedding, full) {
            (_, true) => Variant::Crocodile,
            (Embedding::Se, _) => Variant::Mmoe,
            (Embedding::Me, _) => Variant::MeMmoe,
        };
        run.model.gate = if full { None } else { Some(self.gate) };
        run.train.loss.alpha = match self.loss {
            LossKind::Bce => 0.0,
            LossKind::BceCov => alpha,
        };
        run
    }
}

/// Base, five component rows and the full model.
pub fn default_ablation_cells() -> Vec<AblationCell> {
    use Embedding::*;
    use LossKind::*;
    let cell = |embedding, gate, loss| AblationCell { embedding, gate, loss };
    vec![
        cell(Se, GateKind::Vector, Bce),
        cell(Me, GateKind::Vector, Bce),
        cell(Me, GateKind::Pg, Bce),
        cell(Me, GateKind::Peg, Bce),
        cell(Me, GateKind::Vector, BceCov),
        cell(Me, GateKind::Pg, BceCov),
        cell(Me, GateKind::Peg, BceCov),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    /// First cell is the base every other cell is compared against.
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub config: RunConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            cells: default_ablation_cells(),
            seeds: vec![0, 1, 2],
            alpha: DEFAULT_ALPHA,
            config: RunConfig::for_variant(Variant::Mmoe),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: AblationCell,
    pub auc: Vec<f64>,
    pub gauc: Vec<f64>,
    pub seconds: Vec<f64>,
}

fn overall(run: &RunConfig, ds: &Dataset, seed: u64) -> Result<(f64, f64, f64)> {
    let run = run.clone().with_seed(seed);
    let (tr, te) = ds.split(run.train.test_fraction, seed)?;
    let out = train(&run, &tr, &te, TrainOptions::default())?;
    let r = evaluate(&out.model, &te)?;
    let missing = || Error::InvalidArgument("held-out split lacks both label classes".into());
    Ok((r.overall_auc.ok_or_else(missing)?, r.overall_gauc.ok_or_else(missing)?, out.seconds))
}

/// Trains every cell on every seed. `progress` receives each finished cell.
pub fn run_ablation(grid: &AblationGrid, ds: &Dataset, mut progress: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
    if grid.cells.is_empty() || grid.seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation grid needs at least one cell and one seed".into()));
    }
    let mut out = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let run = cell.run_config(&grid.config, grid.alpha);
        let mut res = CellResult { cell: *cell, auc: Vec::new(), gauc: Vec::new(), seconds: Vec::new() };
        for &seed in &grid.seeds {
            let (a, g, s) = overall(&run, ds, seed)?;
            res.auc.push(a);
            res.gauc.push(g);
            res.seconds.push(s);
        }
        progress(&res);
        out.push(res);
    }
    Ok(out)
}

/// One row per cell: means, standard deviations, lift over the first cell and
/// the paired-t p-value of the gAUC difference.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut s = String::from("method,embedding,gating,loss,seeds,auc_mean,auc_std,auc_lift_pct,gauc_mean,gauc_std,gauc_lift_pct,gauc_p_vs_base\n");
    let base = &results[0];
    for (i, r) in results.iter().enumerate() {
        let label = r.cell.label();
        let parts: Vec<&str> = label.split('/').collect();
        let method = if i == 0 { "base" } else if i + 1 == results.len() { "full" } else { "ablation" };
        let lift = |x: &[f64], b: &[f64]| (mean(x) / mean(b) - 1.0) * 100.0;
        let p = if i == 0 || r.gauc.len() < 2 {
            String::new()
        } else {
            paired_t_test(&r.gauc, &base.gauc).map(|t| format!("{:.6}", t.p_two_sided)).unwrap_or_default()
        };
        s.push_str(&format!(
            "{method},{},{},{},{},{:.6},{:.6},{:.4},{:.6},{:.6},{:.4},{p}\n",
            parts[0],
            parts[1],
            parts[2],
            r.auc.len(),
            mean(&r.auc),
            std_dev(&r.auc),
            lift(&r.auc, &base.auc),
            mean(&r.gauc),
            std_dev(&r.gauc),
            lift(&r.gauc, &base.gauc),
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// CovLoss weights tried on the full model.
    pub alphas: Vec<f64>,
    /// Table counts tried on the full model and the ME + PG baseline.
    pub tables: Vec<usize>,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 1e-5, 2e-5, 1e-4, 1e-3, 1e-2],
            tables: vec![2, 3, 4, 5],
            seeds: vec![0, 1, 2],
            config: RunConfig::for_variant(Variant::Crocodile),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param: &'static str,
    pub value: f64,
    pub model: String,
    pub auc: Vec<f64>,
    pub gauc: Vec<f64>,
    pub seconds: Vec<f64>,
}

pub fn run_sweep(spec: &SweepSpec, ds: &Dataset, mut progress: impl FnMut(&SweepPoint)) -> Result<Vec<SweepPoint>> {
    if (spec.alphas.is_empty() && spec.tables.is_empty()) || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one setting and one seed".into()));
    }
    let mut jobs: Vec<(&'static str, f64, String, RunConfig)> = Vec::new();
    for &alpha in &spec.alphas {
        let mut run = spec.config.clone();
        run.model.variant = Variant::Crocodile;
        run.model.gate = None;
        run.train.loss.alpha = alpha;
        jobs.push(("alpha", alpha, "crocodile".into(), run));
    }
    for &m in &spec.tables {
        let mut full = spec.config.clone();
        full.model.variant = Variant::Crocodile;
        full.model.gate = None;
        full.model.num_tables = m;
        let mut baseline = full.clone();
        baseline.model.variant = Variant::MeMmoe;
        baseline.model.gate = Some(GateKind::Pg);
        baseline.train.loss.alpha = 0.0;
        jobs.push(("tables", m as f64, "crocodile".into(), full));
        jobs.push(("tables", m as f64, "me-mmoe+pg".into(), baseline));
    }
    let mut out = Vec::with_capacity(jobs.len());
    for (param, value, model, run) in jobs {
        let mut p = SweepPoint { param, value, model, auc: Vec::new(), gauc: Vec::new(), seconds: Vec::new() };
        for &seed in &spec.seeds {
            let (a, g, s) = overall(&run, ds, seed)?;
            p.auc.push(a);
            p.gauc.push(g);
            p.seconds.push(s);
        }
        progress(&p);
        out.push(p);
    }
    Ok(out)
}

/// Metric columns only; wall-clock goes to [`sweep_timing_csv`].
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("param,value,model,seeds,auc_mean,auc_std,gauc_mean,gauc_std\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            p.param,
            p.value,
            p.model,
            p.auc.len(),
            mean(&p.auc),
            std_dev(&p.auc),
            mean(&p.gauc),
            std_dev(&p.gauc)
        ));
    }
    s
}

pub fn sweep_timing_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("param,value,model,seconds_mean\n");
    for p in points {
        s.push_str(&format!("{},{},{},{:.3}\n", p.param, p.value, p.model, mean(&p.seconds)));
    }
    s
}

/// gAUC curves of one swept parameter as SVG.
pub fn sweep_plot(points: &[SweepPoint], param: &str) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in points.iter().filter(|p| p.param == param) {
        let entry = match series.iter_mut().find(|(m, _)| *m == p.model) {
            Some(e) => e,
            None => {
                series.push((p.model.clone(), Vec::new()));
                series.last_mut().unwrap()
            }
        };
        entry.1.push((p.value, mean(&p.gauc)));
    }
    if param == "alpha" {
        // Zero has no place on a log axis.
        for (_, pts) in &mut series {
            pts.retain(|&(x, _)| x > 0.0);
        }
    }
    svg::line_plot(&series, param, "gAUC", param == "alpha")
}
