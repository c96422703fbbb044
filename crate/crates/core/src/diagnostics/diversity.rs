//! Cross-domain conflict sets and the diversity index.
//!
//! A reference model with one expert per domain defines, for each ordered
//! domain pair `(i, j)`, the samples on which expert `i` responds strongly
//! (`‖O_i‖ ≥ τ_t`) and expert `j` weakly (`‖O_j‖ ≤ τ_b`). A candidate model
//! scores the fraction of those samples on which its own experts show the
//! same strong/weak split.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_UPPER_PCT: f64 = 75.0;
pub const DEFAULT_LOWER_PCT: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_t: f64,
    pub tau_b: f64,
}

impl Thresholds {
    /// Percentiles of the pooled values.
    pub fn from_pooled(values: &[f64], upper_pct: f64, lower_pct: f64) -> Result<Self> {
        Ok(Self {
            tau_t: percentile(values, upper_pct)?,
            tau_b: percentile(values, lower_pct)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictSet {
    pub i: usize,
    pub j: usize,
    pub members: Vec<usize>,
    pub thresholds: Thresholds,
}

/// How a candidate's experts are matched against a conflict pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiForm {
    /// Any expert above `τ_t` and any expert below `τ_b`.
    Existential,
    /// The experts bound to domains `i` and `j` themselves.
    Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDi {
    pub i: usize,
    pub j: usize,
    pub size: usize,
    pub di: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiReport {
    pub pairs: Vec<PairDi>,
    /// Ordered pairs whose conflict set is empty.
    pub skipped: Vec<(usize, usize)>,
    pub thresholds: Thresholds,
    pub average: Option<f64>,
}

/// Linearly interpolated percentile, `pct ∈ [0, 100]`.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("percentile {pct} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Row norms of every expert output, `[expert][sample]`.
pub fn expert_norms(outputs: &[Tensor]) -> Vec<Vec<f64>> {
    outputs
        .iter()
        .map(|o| (0..o.rows()).map(|r| o.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
        .collect()
}

/// Output norms of each domain's bound expert, `[domain][sample]`.
pub fn domain_expert_norms(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let bound = bound_experts(model)?;
    let norms = expert_norms(&model.evaluate_outputs(ds)?.experts);
    Ok(bound.into_iter().map(|k| norms[k].clone()).collect())
}

fn bound_experts(model: &Model) -> Result<Vec<usize>> {
    (0..model.num_domains())
        .map(|s| {
            model.bound_expert(s).ok_or_else(|| {
                Error::InvalidArgument(format!("variant {} has no expert bound to domain {s}", model.variant()))
            })
        })
        .collect()
}

/// Conflict sets for every ordered pair `i ≠ j` with explicit thresholds.
/// Empty sets are kept.
pub fn conflict_sets_with(norms: &[Vec<f64>], thresholds: Thresholds) -> Vec<ConflictSet> {
    let s = norms.len();
    let n = norms.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(s * s.saturating_sub(1));
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let members = (0..n)
                .filter(|&k| norms[i][k] >= thresholds.tau_t && norms[j][k] <= thresholds.tau_b)
                .collect();
            out.push(ConflictSet { i, j, members, thresholds });
        }
    }
    out
}

/// Conflict sets with thresholds at percentiles of the pooled norms.
pub fn build_conflict_sets(norms: &[Vec<f64>], upper_pct: f64, lower_pct: f64) -> Result<Vec<ConflictSet>> {
    let pooled: Vec<f64> = norms.iter().flatten().copied().collect();
    let t = Thresholds::from_pooled(&pooled, upper_pct, lower_pct)?;
    Ok(conflict_sets_with(norms, t))
}

/// Diversity index of a candidate given its expert norms `[expert][sample]`.
///
/// `bound[s]` names the expert bound to domain `s` and is required for
/// [`DiForm::Bound`].
pub fn diversity_index(
    norms: &[Vec<f64>],
    sets: &[ConflictSet],
    thresholds: Thresholds,
    form: DiForm,
    bound: Option<&[usize]>,
) -> Result<DiReport> {
    if form == DiForm::Bound && bound.is_none() {
        return Err(Error::InvalidArgument("bound diversity index needs the domain-to-expert map".into()));
    }
    let Thresholds { tau_t, tau_b } = thresholds;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for set in sets {
        if set.members.is_empty() {
            skipped.push((set.i, set.j));
            continue;
        }
        let hits = set
            .members
            .iter()
            .filter(|&&k| match form {
                DiForm::Existential => {
                    let max = norms.iter().map(|e| e[k]).fold(f64::NEG_INFINITY, f64::max);
                    let min = norms.iter().map(|e| e[k]).fold(f64::INFINITY, f64::min);
                    max >= tau_t && min <= tau_b
                }
                DiForm::Bound => {
                    let b = bound.expect("bound experts checked above");
                    norms[b[set.i]][k] >= tau_t && norms[b[set.j]][k] <= tau_b
                }
            })
            .count();
        pairs.push(PairDi {
            i: set.i,
            j: set.j,
            size: set.members.len(),
            di: hits as f64 / set.members.len() as f64,
        });
    }
    let average = (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.di).sum::<f64>() / pairs.len() as f64);
    Ok(DiReport { pairs, skipped, thresholds, average })
}

/// Diversity index of `model` on `ds` against reference conflict sets.
///
/// Thresholds are percentiles of the candidate's own pooled norms over the
/// experts its form inspects; domain-bound variants use the bound form.
pub fn model_diversity_index(model: &Model, ds: &Dataset, sets: &[ConflictSet], upper_pct: f64, lower_pct: f64) -> Result<DiReport> {
    let norms = expert_norms(&model.evaluate_outputs(ds)?.experts);
    if model.variant().is_domain_bound() {
        let bound = bound_experts(model)?;
        let pooled: Vec<f64> = bound.iter().flat_map(|&k| norms[k].iter().copied()).collect();
        let t = Thresholds::from_pooled(&pooled, upper_pct, lower_pct)?;
        diversity_index(&norms, sets, t, DiForm::Bound, Some(&bound))
    } else {
        let pooled: Vec<f64> = norms.iter().flatten().copied().collect();
        let t = Thresholds::from_pooled(&pooled, upper_pct, lower_pct)?;
        diversity_index(&norms, sets, t, DiForm::Existential, None)
    }
}
