//! Routing from experts to domain towers.
//!
//! All gates produce a convex combination of expert outputs. The vector form
//! assigns one weight per expert; the element-wise form assigns one weight
//! per (expert, output dimension), normalized over experts independently for
//! every dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    /// Per-expert softmax weights computed from the embedding input.
    Vector,
    /// Per-expert softmax weights computed from the prior embedding.
    Pg,
    /// Per-(expert, dimension) softmax weights computed from the prior embedding.
    Peg,
}

impl GateKind {
    pub fn uses_prior(self) -> bool {
        matches!(self, GateKind::Pg | GateKind::Peg)
    }

    pub fn label(self) -> &'static str {
        match self {
            GateKind::Vector => "-",
            GateKind::Pg => "PG",
            GateKind::Peg => "PEG",
        }
    }
}

/// `N×K` per-sample softmax weights from `input[N×w] · weight[w×K]`.
pub fn gate_vector_softmax(tape: &mut Tape, input: Var, weight: Var) -> Result<Var> {
    let logits = tape.matmul(input, weight)?;
    tape.softmax(logits, 1)
}

/// `Σ_k g[:,k] · O[:,k,:]` for scalar gates `g[N×K]` and stacked experts `O[N×K×d]`.
pub fn mix_scalar(tape: &mut Tape, gates: Var, stack: Var) -> Result<Var> {
    let d = stack_dims(tape, stack)?.2;
    let expanded = tape.expand_last(gates, d)?;
    let weighted = tape.mul(expanded, stack)?;
    tape.sum_axis(weighted, 1)
}

/// Prior-informed element-wise gating.
///
/// `weight` has shape `l × (K·d)`, i.e. the `l×K×d` gate tensor flattened over
/// its last two axes. Returns the gates `g[N×K×d]`, softmax-normalized over
/// `K`, and the mixture `t[N×d] = Σ_k g[:,k,:] ⊙ O[:,k,:]`.
pub fn gate_peg(tape: &mut Tape, prior: Var, weight: Var, stack: Var) -> Result<(Var, Var)> {
    let (n, k, d) = stack_dims(tape, stack)?;
    let w_cols = tape.value(weight).shape().get(1).copied().unwrap_or(0);
    if w_cols != k * d {
        return Err(Error::ShapeMismatch {
            op: "gate_peg",
            lhs: tape.value(weight).shape().to_vec(),
            rhs: vec![k, d],
        });
    }
    let logits = tape.matmul(prior, weight)?;
    let logits = tape.reshape(logits, &[n, k, d])?;
    let gates = tape.softmax(logits, 1)?;
    let weighted = tape.mul(gates, stack)?;
    let mixed = tape.sum_axis(weighted, 1)?;
    Ok((gates, mixed))
}

fn stack_dims(tape: &Tape, stack: Var) -> Result<(usize, usize, usize)> {
    match tape.value(stack).shape() {
        [n, k, d] => Ok((*n, *k, *d)),
        other => Err(Error::ShapeMismatch {
            op: "gate",
            lhs: other.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}
