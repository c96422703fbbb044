//! Multi-domain objective: per-domain BCE plus a weighted disentangling term.
//!
//! The covariance loss of experts `O_1..O_K` (each `N×d`) is
//!
//! ```text
//! (1/d²) Σ_{(p,q)} ‖ (O_p − Ō_p)ᵀ (O_q − Ō_q) ‖₁
//! ```
//!
//! where `Ō` is the batch mean row. The default pair set is `p > q`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::ForwardPass;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm_tn, Tensor};

/// Norm floor of the cosine loss.
pub const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSet {
    /// `p > q`.
    #[default]
    StrictCross,
    /// `p ≥ q`, including each expert's own covariance.
    Literal,
}

impl PairSet {
    pub fn pairs(self, k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in 0..k {
            for q in 0..k {
                if p > q || (self == PairSet::Literal && p == q) {
                    out.push((p, q));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AltLoss {
    #[default]
    None,
    Dot,
    Cos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub pairs: PairSet,
    /// Rows sampled for the covariance loss; 0 uses the whole batch.
    pub sample_count: usize,
    /// Replaces the covariance loss when not `none`.
    pub alt: AltLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            pairs: PairSet::StrictCross,
            sample_count: 0,
            alt: AltLoss::None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.sample_count == 1 {
            return Err(Error::InvalidArgument("sample_count must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean BCE per domain; `None` for domains absent from the batch.
    pub bce: Vec<Option<f64>>,
    /// Value of the disentangling term (weighted by `alpha` in the total).
    pub disentangle: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossReport {
    pub fn bce_sum(&self) -> f64 {
        self.bce.iter().flatten().sum()
    }
}

/// Mean BCE of each domain present in the pass, as `(domain, scalar)`.
pub fn bce_per_domain(pass: &mut ForwardPass, batch: &Batch) -> Result<Vec<(usize, Var)>> {
    let mut out = Vec::with_capacity(pass.domains.len());
    for d in &pass.domains {
        let labels = batch.labels_at(&d.positions);
        out.push((d.domain, pass.tape.bce(d.predictions, &labels)?));
    }
    Ok(out)
}

fn check_experts(tape: &Tape, experts: &[Var]) -> Result<(usize, usize)> {
    let first = *experts.first().ok_or(Error::EmptyInput("covloss"))?;
    let shape = tape.value(first).shape().to_vec();
    let [n, d] = shape[..] else {
        return Err(Error::ShapeMismatch { op: "covloss", lhs: shape, rhs: vec![0, 0] });
    };
    for &e in experts {
        if tape.value(e).shape() != [n, d] {
            return Err(Error::ShapeMismatch {
                op: "covloss",
                lhs: vec![n, d],
                rhs: tape.value(e).shape().to_vec(),
            });
        }
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covloss needs at least 2 rows, got {n}")));
    }
    Ok((n, d))
}

/// Covariance loss over whole-batch expert outputs, recorded on the tape.
pub fn covloss(tape: &mut Tape, experts: &[Var], pairs: PairSet) -> Result<Var> {
    let (_, d) = check_experts(tape, experts)?;
    let selected = pairs.pairs(experts.len());
    if selected.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let mut centered = Vec::with_capacity(experts.len());
    for &o in experts {
        let mean = tape.mean_rows(o)?;
        centered.push(tape.sub(o, mean)?);
    }
    let mut transposed: Vec<Option<Var>> = vec![None; experts.len()];
    let mut acc: Option<Var> = None;
    for (p, q) in selected {
        let cp_t = match transposed[p] {
            Some(v) => v,
            None => {
                let v = tape.transpose(centered[p])?;
                transposed[p] = Some(v);
                v
            }
        };
        let cross = tape.matmul(cp_t, centered[q])?;
        let term = tape.abs_sum(cross)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("at least one pair"), 1.0 / (d * d) as f64)
}

/// Covariance loss on `n_sub` rows drawn uniformly without replacement,
/// shared by every expert. `n_sub == N` is exactly [`covloss`].
pub fn covloss_sampled(tape: &mut Tape, experts: &[Var], pairs: PairSet, n_sub: usize, seed: u64) -> Result<Var> {
    let (n, _) = check_experts(tape, experts)?;
    if n_sub < 2 || n_sub > n {
        return Err(Error::InvalidArgument(format!("sample count {n_sub} outside 2..={n}")));
    }
    if n_sub == n {
        return covloss(tape, experts, pairs);
    }
    let rows = sample_rows(n, n_sub, seed);
    let mut sub = Vec::with_capacity(experts.len());
    for &e in experts {
        sub.push(tape.gather_rows(e, &rows)?);
    }
    covloss(tape, &sub, pairs)
}

/// Sorted row indices of a uniform `n_sub`-subset of `0..n`.
pub fn sample_rows(n: usize, n_sub: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, n_sub).into_vec();
    rows.sort_unstable();
    rows
}

/// Covariance loss of plain tensors, for diagnostics.
pub fn covloss_tensors(experts: &[Tensor], pairs: PairSet) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = experts.iter().map(|e| tape.constant(e.clone())).collect();
    let v = covloss(&mut tape, &vars, pairs)?;
    Ok(tape.value(v).item())
}

/// Raw `(1/d²)‖C_pᵀC_q‖₁` for every ordered pair of experts, `K×K` row-major.
pub fn cross_cov_matrix(experts: &[Tensor]) -> Result<Vec<f64>> {
    let k = experts.len();
    let first = experts.first().ok_or(Error::EmptyInput("cross_cov_matrix"))?;
    let (n, d) = (first.rows(), first.row_len());
    let centered: Vec<Vec<f64>> = experts
        .iter()
        .map(|e| {
            if e.shape() != [n, d] {
                return Err(Error::ShapeMismatch { op: "cross_cov_matrix", lhs: vec![n, d], rhs: e.shape().to_vec() });
            }
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(e.row(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            Ok(e.data().chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; k * k];
    let mut buf = vec![0.0; d * d];
    for p in 0..k {
        for q in 0..k {
            buf.iter_mut().for_each(|b| *b = 0.0);
            gemm_tn(&centered[p], &centered[q], &mut buf, n, d, d);
            out[p * k + q] = buf.iter().map(|v| v.abs()).sum::<f64>() / (d * d) as f64;
        }
    }
    Ok(out)
}

/// Multiply-adds of one covariance-loss evaluation on `n` rows.
pub fn covloss_op_count(n: usize, d: usize, k: usize, pairs: PairSet) -> u64 {
    let centering = 2 * n * d * k;
    let products = pairs.pairs(k).len() * (n * d * d + d * d);
    (centering + products) as u64
}

/// Dot or cosine disentangling loss: mean over `p > q` pairs and samples of
/// `|⟨O_p[i], O_q[i]⟩|` or `|cos(O_p[i], O_q[i])|`.
pub fn alt_disentangle_loss(tape: &mut Tape, kind: AltLoss, experts: &[Var]) -> Result<Var> {
    check_experts(tape, experts)?;
    let pairs = PairSet::StrictCross.pairs(experts.len());
    if kind == AltLoss::None || pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let norms: Vec<Var> = if kind == AltLoss::Cos {
        experts.iter().map(|&e| tape.row_norm(e, COS_EPS)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut acc: Option<Var> = None;
    for &(p, q) in &pairs {
        let prod = tape.mul(experts[p], experts[q])?;
        let mut dot = tape.sum_axis(prod, 1)?;
        if kind == AltLoss::Cos {
            let denom = tape.mul(norms[p], norms[q])?;
            dot = tape.div(dot, denom)?;
        }
        let abs = tape.abs(dot)?;
        let term = tape.mean(abs)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("at least one pair"), 1.0 / pairs.len() as f64)
}

/// Records `Σ_s BCE_s + α·L_dis` for a forward pass.
///
/// `seed` drives row sampling when `sample_count` is set. The disentangling
/// term is only recorded on the tape when `alpha > 0`; its value is always
/// reported.
pub fn total_loss(pass: &mut ForwardPass, batch: &Batch, cfg: &LossConfig, num_domains: usize, seed: u64) -> Result<(Var, LossReport)> {
    let parts = bce_per_domain(pass, batch)?;
    let mut bce = vec![None; num_domains];
    let mut acc: Option<Var> = None;
    for &(s, v) in &parts {
        bce[s] = Some(pass.tape.value(v).item());
        acc = Some(match acc {
            Some(a) => pass.tape.add(a, v)?,
            None => v,
        });
    }
    let mut total = acc.ok_or(Error::EmptyInput("total_loss"))?;

    let experts = pass.experts.clone();
    let disentangle = if experts.len() < 2 || pass.batch_len < 2 {
        None
    } else if cfg.alpha > 0.0 {
        Some(disentangle_var(&mut pass.tape, &experts, cfg, seed)?)
    } else {
        let mut scratch = Tape::new();
        let vars: Vec<Var> = experts.iter().map(|&e| scratch.constant(pass.tape.value(e).clone())).collect();
        let v = disentangle_var(&mut scratch, &vars, cfg, seed)?;
        let value = scratch.value(v).item();
        let c = pass.tape.constant(Tensor::scalar(value));
        Some(c)
    };
    let dis_value = disentangle.map_or(0.0, |v| pass.tape.value(v).item());
    if cfg.alpha > 0.0 {
        if let Some(v) = disentangle {
            let weighted = pass.tape.scale(v, cfg.alpha)?;
            total = pass.tape.add(total, weighted)?;
        }
    }
    let report = LossReport {
        bce,
        disentangle: dis_value,
        alpha: cfg.alpha,
        total: pass.tape.value(total).item(),
    };
    Ok((total, report))
}

fn disentangle_var(tape: &mut Tape, experts: &[Var], cfg: &LossConfig, seed: u64) -> Result<Var> {
    match cfg.alt {
        AltLoss::None => {
            let n = tape.value(experts[0]).rows();
            if cfg.sample_count == 0 || cfg.sample_count >= n {
                covloss(tape, experts, cfg.pairs)
            } else {
                covloss_sampled(tape, experts, cfg.pairs, cfg.sample_count, seed)
            }
        }
        kind => alt_disentangle_loss(tape, kind, experts),
    }
}
