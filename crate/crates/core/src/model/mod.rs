//! Expert, tower and gate assembly for the supported architectures.
//!
//! | variant        | tables                 | experts                          | routing                              |
//! |----------------|------------------------|----------------------------------|--------------------------------------|
//! | shared-bottom  | 1                      | 1                                | tower reads the expert directly      |
//! | mmoe           | 1                      | `num_experts`                    | vector gate over all experts         |
//! | ple            | 1                      | shared + one per domain          | vector gate over shared + own        |
//! | me-mmoe        | `num_tables`           | `experts_per_table` per table    | vector gate over all experts         |
//! | me-ple         | 1 shared + 1 per domain| shared + one per domain          | vector gate over shared + own        |
//! | sdem           | 1 shared + 1 per domain| shared + one per domain          | vector gate over all, foreign specific experts detached |
//! | crocodile      | `num_tables`           | `experts_per_table` per table    | element-wise prior gate over all     |
//!
//! The gate of the multi-gate variants can be overridden (`gate`) for
//! ablations; the covariance loss is wired in by the trainer.

mod gating;
mod mlp;

pub use gating::{gate_peg, gate_vector_softmax, mix_scalar, GateKind};
pub use mlp::Mlp;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Batch, Dataset, Schema};
use crate::embedding::{default_init_scale, init_bank, EmbeddingBank, PriorTable, SharingMode};
use crate::error::{Error, Result};
use crate::params::{sub_seed, uniform, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SharedBottom,
    Mmoe,
    Ple,
    MeMmoe,
    MePle,
    Sdem,
    Crocodile,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SharedBottom,
        Variant::Mmoe,
        Variant::Ple,
        Variant::MeMmoe,
        Variant::MePle,
        Variant::Sdem,
        Variant::Crocodile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SharedBottom => "shared-bottom",
            Variant::Mmoe => "mmoe",
            Variant::Ple => "ple",
            Variant::MeMmoe => "me-mmoe",
            Variant::MePle => "me-ple",
            Variant::Sdem => "sdem",
            Variant::Crocodile => "crocodile",
        }
    }

    /// Whether experts are bound to domains.
    pub fn is_domain_bound(self) -> bool {
        matches!(self, Variant::Ple | Variant::MePle | Variant::Sdem)
    }

    pub fn is_multi_embedding(self) -> bool {
        matches!(self, Variant::MeMmoe | Variant::MePle | Variant::Sdem | Variant::Crocodile)
    }

    fn default_gate(self) -> Option<GateKind> {
        match self {
            Variant::SharedBottom => None,
            Variant::Crocodile => Some(GateKind::Peg),
            _ => Some(GateKind::Vector),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!("unknown variant `{s}`; valid: {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Shared tables of the multi-embedding variants (`me-mmoe`, `crocodile`).
    pub num_tables: usize,
    /// Experts of the single-embedding `mmoe`.
    pub num_experts: usize,
    /// Shared experts of `ple`, `me-ple` and `sdem`.
    pub shared_experts: usize,
    /// Experts reading each table in `me-mmoe`/`crocodile`.
    pub experts_per_table: usize,
    pub embed_dim: usize,
    pub expert_dim: usize,
    pub expert_hidden: Vec<usize>,
    pub tower_hidden: Vec<usize>,
    /// Overrides the variant's gate (multi-gate variants only).
    pub gate: Option<GateKind>,
    /// Prior field names; defaults to the user, item and domain-id fields.
    pub prior_fields: Option<Vec<String>>,
    /// Half-width of the uniform embedding initializer; defaults to `1/√d_e`.
    pub init_scale: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Crocodile,
            num_tables: 5,
            num_experts: 5,
            shared_experts: 1,
            experts_per_table: 1,
            embed_dim: 8,
            expert_dim: 16,
            expert_hidden: vec![64],
            tower_hidden: vec![32],
            gate: None,
            prior_fields: None,
            init_scale: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn gate_kind(&self) -> Option<GateKind> {
        match self.variant {
            Variant::SharedBottom => None,
            Variant::Ple | Variant::MePle | Variant::Sdem => Some(GateKind::Vector),
            v => self.gate.or(v.default_gate()),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tables", self.num_tables),
            ("num_experts", self.num_experts),
            ("shared_experts", self.shared_experts),
            ("experts_per_table", self.experts_per_table),
            ("embed_dim", self.embed_dim),
            ("expert_dim", self.expert_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.expert_hidden.contains(&0) || self.tower_hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.gate.is_some() && !matches!(self.variant, Variant::Mmoe | Variant::MeMmoe | Variant::Crocodile) {
            return Err(Error::InvalidArgument(format!("variant {} does not take a gate override", self.variant)));
        }
        Ok(())
    }
}

/// An expert and the table it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSlot {
    pub mlp: Mlp,
    pub table: usize,
    pub domain: Option<usize>,
}

/// Routing of one domain's tower.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSlot {
    pub kind: GateKind,
    pub weight: ParamId,
    /// Experts mixed by this gate, in stacking order.
    pub experts: Vec<usize>,
    /// Members that enter the mixture with their gradient cut.
    pub detached: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: Schema,
    pub params: ParamSet,
    pub bank: EmbeddingBank,
    pub prior: Option<PriorTable>,
    pub experts: Vec<ExpertSlot>,
    /// One entry per domain; `None` means the tower reads expert 0 directly.
    pub gates: Vec<Option<GateSlot>>,
    pub towers: Vec<Mlp>,
}

/// Output of one domain's tower for the batch positions of that domain.
#[derive(Debug, Clone)]
pub struct DomainOutput {
    pub domain: usize,
    pub positions: Vec<usize>,
    pub logits: Var,
    pub predictions: Var,
    pub gates: Option<Var>,
}

/// A recorded forward pass, ready for loss construction and backward.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub vars: Vec<Var>,
    /// `N×d` output of every expert on every batch sample.
    pub experts: Vec<Var>,
    pub domains: Vec<DomainOutput>,
    pub batch_len: usize,
}

impl ForwardPass {
    /// Own-domain prediction for every batch position.
    pub fn predictions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch_len];
        for d in &self.domains {
            for (&pos, &p) in d.positions.iter().zip(self.tape.value(d.predictions).data()) {
                out[pos] = p.clamp(crate::tape::BCE_EPS, 1.0 - crate::tape::BCE_EPS);
            }
        }
        out
    }

    pub fn expert_values(&self) -> Vec<Tensor> {
        self.experts.iter().map(|&v| self.tape.value(v).clone()).collect()
    }
}

/// Predictions and expert outputs over a whole dataset.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub predictions: Vec<f64>,
    pub experts: Vec<Tensor>,
}

const EVAL_BATCH: usize = 4096;

impl Model {
    pub fn new(config: ModelConfig, schema: &Schema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let s_count = schema.num_domains;
        let seed = config.seed;
        let d_e = config.embed_dim;
        let d = config.expert_dim;
        let init_scale = config.init_scale.unwrap_or_else(|| default_init_scale(d_e));
        let mut params = ParamSet::new();

        let (num_tables, mode) = match config.variant {
            Variant::SharedBottom | Variant::Mmoe | Variant::Ple => (1, SharingMode::AllShared),
            Variant::MeMmoe | Variant::Crocodile => (config.num_tables, SharingMode::AllShared),
            Variant::MePle | Variant::Sdem => (s_count + 1, SharingMode::DomainSpecific),
        };
        let bank = init_bank(schema, num_tables, d_e, mode, sub_seed(seed, 1), init_scale, &mut params)?;

        // (table, bound domain) for every expert.
        let layout: Vec<(usize, Option<usize>)> = match config.variant {
            Variant::SharedBottom => vec![(0, None)],
            Variant::Mmoe => vec![(0, None); config.num_experts],
            Variant::MeMmoe | Variant::Crocodile => (0..num_tables)
                .flat_map(|p| std::iter::repeat_n((p, None), config.experts_per_table))
                .collect(),
            Variant::Ple => std::iter::repeat_n((0, None), config.shared_experts)
                .chain((0..s_count).map(|s| (0, Some(s))))
                .collect(),
            Variant::MePle | Variant::Sdem => std::iter::repeat_n((0, None), config.shared_experts)
                .chain((0..s_count).map(|s| (1 + s, Some(s))))
                .collect(),
        };
        let mut widths = vec![bank.output_width()];
        widths.extend(&config.expert_hidden);
        widths.push(d);
        let experts: Vec<ExpertSlot> = layout
            .iter()
            .enumerate()
            .map(|(k, &(table, domain))| ExpertSlot {
                mlp: Mlp::new(&format!("expert.{k}"), &widths, sub_seed(seed, 100 + k as u64), &mut params),
                table,
                domain,
            })
            .collect();

        let gate_kind = config.gate_kind();
        let prior = match gate_kind {
            Some(kind) if kind.uses_prior() => {
                let fields = match &config.prior_fields {
                    Some(names) => names
                        .iter()
                        .map(|n| {
                            schema
                                .field_index(n)
                                .ok_or_else(|| Error::InvalidArgument(format!("prior field `{n}` not in schema")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                    None => schema.default_prior_fields(),
                };
                Some(PriorTable::new(schema, fields, d_e, sub_seed(seed, 2), init_scale, &mut params)?)
            }
            _ => None,
        };

        let mut gates = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let Some(kind) = gate_kind else {
                gates.push(None);
                continue;
            };
            let members: Vec<usize> = match config.variant {
                Variant::Ple | Variant::MePle => (0..experts.len())
                    .filter(|&k| experts[k].domain.is_none() || experts[k].domain == Some(s))
                    .collect(),
                _ => (0..experts.len()).collect(),
            };
            let detached = members
                .iter()
                .map(|&k| config.variant == Variant::Sdem && experts[k].domain.is_some_and(|own| own != s))
                .collect();
            let in_width = match kind {
                GateKind::Vector => bank.output_width(),
                GateKind::Pg | GateKind::Peg => prior.as_ref().expect("prior gate has a prior table").width(),
            };
            let out_width = match kind {
                GateKind::Peg => members.len() * d,
                _ => members.len(),
            };
            let bound = 1.0 / (in_width as f64).sqrt();
            let weight = params.add(
                format!("gate.{s}"),
                uniform(&[in_width, out_width], bound, sub_seed(seed, 200 + s as u64)),
            );
            gates.push(Some(GateSlot {
                kind,
                weight,
                experts: members,
                detached,
            }));
        }

        let mut tower_widths = vec![d];
        tower_widths.extend(&config.tower_hidden);
        tower_widths.push(1);
        let towers = (0..s_count)
            .map(|s| Mlp::new(&format!("tower.{s}"), &tower_widths, sub_seed(seed, 300 + s as u64), &mut params))
            .collect();

        Ok(Self {
            config,
            schema: schema.clone(),
            params,
            bank,
            prior,
            experts,
            gates,
            towers,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_domains(&self) -> usize {
        self.schema.num_domains
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Expert bound to domain `s`, for domain-bound variants.
    pub fn bound_expert(&self, s: usize) -> Option<usize> {
        self.experts.iter().position(|e| e.domain == Some(s))
    }

    /// Embedding table owned by domain `s`, for domain-specific banks.
    pub fn domain_table(&self, s: usize) -> Option<&Tensor> {
        (0..self.bank.num_tables())
            .find(|&p| self.bank.table_domain(p) == Some(s))
            .map(|p| self.params.get(self.bank.tables[p]))
    }

    /// Tables trained by every domain.
    pub fn shared_tables(&self) -> Vec<&Tensor> {
        (0..self.bank.num_tables())
            .filter(|&p| self.bank.table_domain(p).is_none())
            .map(|p| self.params.get(self.bank.tables[p]))
            .collect()
    }

    pub fn forward(&self, batch: &Batch, train: bool) -> Result<ForwardPass> {
        if batch.num_fields != self.schema.num_fields() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![batch.num_fields],
                rhs: vec![self.schema.num_fields()],
            });
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, train);
        let embeds = (0..self.bank.num_tables())
            .map(|p| self.bank.lookup_concat(&mut tape, &vars, p, batch))
            .collect::<Result<Vec<_>>>()?;
        let experts = self
            .experts
            .iter()
            .map(|e| e.mlp.forward(&mut tape, &vars, embeds[e.table]))
            .collect::<Result<Vec<_>>>()?;
        let prior = match &self.prior {
            Some(p) => Some(p.lookup_prior(&mut tape, &vars, batch)?),
            None => None,
        };

        let mut domains = Vec::new();
        for (s, positions) in batch.domain_rows.iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let (mixed, gate_out) = match &self.gates[s] {
                None => (tape.gather_rows(experts[0], positions)?, None),
                Some(gate) => {
                    let mut members = Vec::with_capacity(gate.experts.len());
                    for (&k, &det) in gate.experts.iter().zip(&gate.detached) {
                        let rows = tape.gather_rows(experts[k], positions)?;
                        members.push(if det { tape.detach(rows) } else { rows });
                    }
                    let stack = tape.stack(&members)?;
                    let w = vars[gate.weight.0];
                    match gate.kind {
                        GateKind::Vector => {
                            let input = tape.gather_rows(embeds[0], positions)?;
                            let g = gate_vector_softmax(&mut tape, input, w)?;
                            (mix_scalar(&mut tape, g, stack)?, Some(g))
                        }
                        GateKind::Pg => {
                            let r = tape.gather_rows(prior.expect("prior gate"), positions)?;
                            let g = gate_vector_softmax(&mut tape, r, w)?;
                            (mix_scalar(&mut tape, g, stack)?, Some(g))
                        }
                        GateKind::Peg => {
                            let r = tape.gather_rows(prior.expect("prior gate"), positions)?;
                            let (g, t) = gate_peg(&mut tape, r, w, stack)?;
                            (t, Some(g))
                        }
                    }
                }
            };
            let logit = self.towers[s].forward(&mut tape, &vars, mixed)?;
            let logits = tape.reshape(logit, &[positions.len()])?;
            let predictions = tape.sigmoid(logits)?;
            domains.push(DomainOutput {
                domain: s,
                positions: positions.clone(),
                logits,
                predictions,
                gates: gate_out,
            });
        }
        Ok(ForwardPass {
            tape,
            vars,
            experts,
            domains,
            batch_len: batch.len(),
        })
    }

    /// `N×d` outputs of every expert for a batch, without recording gradients.
    pub fn forward_experts(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        Ok(self.forward(batch, false)?.expert_values())
    }

    /// Predictions and expert outputs over `ds`, in dataset order.
    pub fn evaluate_outputs(&self, ds: &Dataset) -> Result<EvalOutputs> {
        let mut predictions = Vec::with_capacity(ds.len());
        let mut chunks: Vec<Vec<f64>> = vec![Vec::new(); self.experts.len()];
        for batch in batch_iter(ds, EVAL_BATCH, None)? {
            let pass = self.forward(&batch, false)?;
            predictions.extend(pass.predictions());
            for (k, v) in pass.experts.iter().enumerate() {
                chunks[k].extend_from_slice(pass.tape.value(*v).data());
            }
        }
        let d = self.config.expert_dim;
        let experts = chunks
            .into_iter()
            .map(|c| Tensor::new(vec![c.len() / d, d], c))
            .collect::<Result<_>>()?;
        Ok(EvalOutputs { predictions, experts })
    }

    /// Parameters a batch of domain `s` may send gradient to.
    pub fn domain_reachable_params(&self, s: usize) -> BTreeSet<ParamId> {
        let mut set = BTreeSet::new();
        set.extend(self.towers[s].param_ids());
        let add_expert = |k: usize, set: &mut BTreeSet<ParamId>| {
            set.extend(self.experts[k].mlp.param_ids());
            set.insert(self.bank.tables[self.experts[k].table]);
        };
        match &self.gates[s] {
            None => add_expert(0, &mut set),
            Some(gate) => {
                set.insert(gate.weight);
                for (&k, &det) in gate.experts.iter().zip(&gate.detached) {
                    if !det {
                        add_expert(k, &mut set);
                    }
                }
                match gate.kind {
                    GateKind::Vector => {
                        set.insert(self.bank.tables[0]);
                    }
                    GateKind::Pg | GateKind::Peg => {
                        set.insert(self.prior.as_ref().expect("prior gate").param);
                    }
                }
            }
        }
        set
    }
}
