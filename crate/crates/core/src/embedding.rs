//! Multi-embedding lookup tables and the prior table used for gating.
//!
//! Every table stores all fields stacked row-wise: field `f` occupies rows
//! `offset[f]..offset[f] + vocab[f]`. A lookup gathers the `F` rows of each
//! sample in schema order and reshapes them into one `F·d_e` wide row, which
//! is exactly the per-sample concatenation of the field embeddings.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Schema};
use crate::error::{Error, Result};
use crate::params::{sub_seed, uniform, ParamId, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// Every table is trained by every domain.
    AllShared,
    /// Table 0 is shared; table `1 + s` belongs to domain `s`.
    DomainSpecific,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub mode: SharingMode,
    pub embed_dim: usize,
    pub tables: Vec<ParamId>,
    field_offsets: Vec<usize>,
    total_rows: usize,
}

fn offsets(schema: &Schema, fields: &[usize]) -> (Vec<usize>, usize) {
    let mut offs = Vec::with_capacity(fields.len());
    let mut acc = 0;
    for &f in fields {
        offs.push(acc);
        acc += schema.fields[f].vocab_size;
    }
    (offs, acc)
}

fn global_ids(batch: &Batch, fields: &[usize], offs: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(batch.len() * fields.len());
    for pos in 0..batch.len() {
        for (&f, &off) in fields.iter().zip(offs) {
            ids.push(off + batch.field_id(pos, f) as usize);
        }
    }
    ids
}

/// Default half-width of the uniform initializer, `1/√d_e`.
pub fn default_init_scale(embed_dim: usize) -> f64 {
    1.0 / (embed_dim as f64).sqrt()
}

/// Allocates `num_tables` tables in `params`, each with its own sub-seed.
pub fn init_bank(
    schema: &Schema,
    num_tables: usize,
    embed_dim: usize,
    mode: SharingMode,
    seed: u64,
    init_scale: f64,
    params: &mut ParamSet,
) -> Result<EmbeddingBank> {
    if num_tables == 0 {
        return Err(Error::InvalidArgument("embedding bank needs at least one table".into()));
    }
    if mode == SharingMode::DomainSpecific && num_tables != schema.num_domains + 1 {
        return Err(Error::InvalidArgument(format!(
            "domain-specific bank needs {} tables, got {num_tables}",
            schema.num_domains + 1
        )));
    }
    let all: Vec<usize> = (0..schema.num_fields()).collect();
    let (field_offsets, total_rows) = offsets(schema, &all);
    let tables = (0..num_tables)
        .map(|p| {
            let t = uniform(&[total_rows, embed_dim], init_scale, sub_seed(seed, p as u64));
            params.add(format!("emb.{p}"), t)
        })
        .collect();
    Ok(EmbeddingBank {
        mode,
        embed_dim,
        tables,
        field_offsets,
        total_rows,
    })
}

impl EmbeddingBank {
    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn num_fields(&self) -> usize {
        self.field_offsets.len()
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Width of one looked-up row, `F·d_e`.
    pub fn output_width(&self) -> usize {
        self.num_fields() * self.embed_dim
    }

    /// Rows of field `f` inside every table.
    pub fn field_rows(&self, f: usize, schema: &Schema) -> std::ops::Range<usize> {
        let start = self.field_offsets[f];
        start..start + schema.fields[f].vocab_size
    }

    /// Domain owning table `p`, if any.
    pub fn table_domain(&self, p: usize) -> Option<usize> {
        match self.mode {
            SharingMode::AllShared => None,
            SharingMode::DomainSpecific => p.checked_sub(1),
        }
    }

    /// `N × F·d_e` concatenated embeddings from table `p`.
    pub fn lookup_concat(&self, tape: &mut Tape, vars: &[Var], p: usize, batch: &Batch) -> Result<Var> {
        let table = *self.tables.get(p).ok_or_else(|| {
            Error::InvalidArgument(format!("table {p} out of range ({} tables)", self.tables.len()))
        })?;
        let fields: Vec<usize> = (0..self.num_fields()).collect();
        let ids = global_ids(batch, &fields, &self.field_offsets);
        let rows = tape.gather_rows(vars[table.0], &ids)?;
        tape.reshape(rows, &[batch.len(), self.output_width()])
    }
}

/// Embeddings of the domain-unrelated prior fields that drive gating.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    pub fields: Vec<usize>,
    pub embed_dim: usize,
    pub param: ParamId,
    offsets: Vec<usize>,
}

impl PriorTable {
    pub fn new(schema: &Schema, fields: Vec<usize>, embed_dim: usize, seed: u64, init_scale: f64, params: &mut ParamSet) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InvalidArgument("prior table needs at least one field".into()));
        }
        if let Some(&bad) = fields.iter().find(|&&f| f >= schema.num_fields()) {
            return Err(Error::InvalidArgument(format!("prior field {bad} not in schema")));
        }
        let (offsets, total) = offsets(schema, &fields);
        let param = params.add("prior", uniform(&[total, embed_dim], init_scale, seed));
        Ok(Self {
            fields,
            embed_dim,
            param,
            offsets,
        })
    }

    /// Width `l = F′·d_e`.
    pub fn width(&self) -> usize {
        self.fields.len() * self.embed_dim
    }

    pub fn lookup_prior(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var> {
        let ids = global_ids(batch, &self.fields, &self.offsets);
        let rows = tape.gather_rows(vars[self.param.0], &ids)?;
        tape.reshape(rows, &[batch.len(), self.width()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, FieldRole, FieldSchema, Sample};
    use crate::tensor::Tensor;

    fn schema(vocab: usize) -> Schema {
        Schema::new(
            vec![
                FieldSchema { name: "user_id".into(), vocab_size: vocab, role: FieldRole::User },
                FieldSchema { name: "item_id".into(), vocab_size: vocab, role: FieldRole::Item },
                FieldSchema { name: "context".into(), vocab_size: 4, role: FieldRole::Context },
                FieldSchema { name: "domain".into(), vocab_size: 2, role: FieldRole::DomainId },
            ],
            2,
        )
        .unwrap()
    }

    fn batch(rows: &[[u32; 4]]) -> Batch {
        let samples = rows
            .iter()
            .map(|r| Sample { ids: r.to_vec(), domain: r[3] as usize, label: 0, user_id: r[0] })
            .collect();
        Batch::full(&Dataset::new(schema(6), samples).unwrap())
    }

    #[test]
    fn lookup_concatenates_fields_in_order() {
        let mut params = ParamSet::new();
        let bank = init_bank(&schema(6), 1, 2, SharingMode::AllShared, 1, 0.5, &mut params).unwrap();
        let b = batch(&[[1, 2, 3, 0], [1, 2, 3, 0]]);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let e = bank.lookup_concat(&mut tape, &vars, 0, &b).unwrap();
        let v = tape.value(e);
        assert_eq!(v.shape(), &[2, 8]);
        let table = params.get(bank.tables[0]);
        assert_eq!(&v.row(0)[0..2], table.row(1));
        assert_eq!(&v.row(0)[2..4], table.row(6 + 2));
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn gradient_touches_only_looked_up_rows() {
        let mut params = ParamSet::new();
        let bank = init_bank(&schema(6), 1, 2, SharingMode::AllShared, 1, 0.5, &mut params).unwrap();
        let b = batch(&[[1, 2, 3, 0]]);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let e = bank.lookup_concat(&mut tape, &vars, 0, &b).unwrap();
        let loss = tape.sum(e).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(vars[0]).unwrap();
        let touched = [1, 6 + 2, 12 + 3, 16];
        for r in 0..g.rows() {
            let expect = if touched.contains(&r) { 1.0 } else { 0.0 };
            assert!(g.row(r).iter().all(|&x| x == expect), "row {r}");
        }
    }

    #[test]
    fn prior_width_and_independence() {
        let s = schema(6);
        let mut params = ParamSet::new();
        let bank = init_bank(&s, 2, 4, SharingMode::AllShared, 3, 0.5, &mut params).unwrap();
        let prior = PriorTable::new(&s, s.default_prior_fields(), 4, 9, 0.5, &mut params).unwrap();
        assert_eq!(prior.width(), 12);

        let run = |b: &Batch| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let r = prior.lookup_prior(&mut tape, &vars, b).unwrap();
            tape.value(r).clone()
        };
        // Only the context field (not a prior field) differs.
        assert_eq!(run(&batch(&[[1, 2, 0, 1]])), run(&batch(&[[1, 2, 3, 1]])));

        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let r = prior.lookup_prior(&mut tape, &vars, &batch(&[[1, 2, 3, 1]])).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        for &t in &bank.tables {
            assert!(g.get(vars[t.0]).unwrap().data().iter().all(|&x| x == 0.0));
        }
        assert!(g.get(vars[prior.param.0]).unwrap().data().iter().any(|&x| x != 0.0));
        assert!(!bank.tables.contains(&prior.param));
    }

    #[test]
    fn tables_are_decorrelated_and_reproducible() {
        let s = schema(6);
        let mut a = ParamSet::new();
        let bank = init_bank(&s, 2, 4, SharingMode::AllShared, 42, 0.5, &mut a).unwrap();
        assert_ne!(a.get(bank.tables[0]), a.get(bank.tables[1]));
        let mut b = ParamSet::new();
        init_bank(&s, 2, 4, SharingMode::AllShared, 42, 0.5, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_moments_match_uniform() {
        let d_e = 8;
        let s = schema(1000);
        let mut params = ParamSet::new();
        let bank = init_bank(&s, 1, d_e, SharingMode::AllShared, 5, default_init_scale(d_e), &mut params).unwrap();
        let t: &Tensor = params.get(bank.tables[0]);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expect = 1.0 / (3.0 * d_e as f64).sqrt();
        assert!((sd - expect).abs() / expect < 0.10, "{sd} vs {expect}");
    }

    #[test]
    fn bad_configs() {
        let s = schema(6);
        let mut p = ParamSet::new();
        assert!(init_bank(&s, 0, 2, SharingMode::AllShared, 0, 0.1, &mut p).is_err());
        assert!(init_bank(&s, 2, 2, SharingMode::DomainSpecific, 0, 0.1, &mut p).is_err());
        let bank = init_bank(&s, 1, 2, SharingMode::AllShared, 0, 0.1, &mut p).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        assert!(bank.lookup_concat(&mut tape, &vars, 1, &batch(&[[0, 0, 0, 0]])).is_err());
    }
}
