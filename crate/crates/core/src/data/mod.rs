//! Domain-tagged categorical samples.

mod batch;
mod csv_io;
mod filter;
mod synth;

pub use batch::{batch_iter, Batch, BatchIter};
pub use csv_io::{load_csv, load_schema, save_schema, write_csv};
pub use filter::{filter_low_frequency, DEFAULT_MIN_COUNT};
pub use synth::{generate_synthetic, SyntheticSpec, KUAIRAND_RATIOS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldRole {
    User,
    Item,
    Context,
    DomainId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub vocab_size: usize,
    pub role: FieldRole,
}

/// Field layout plus the number of domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldSchema>,
    pub num_domains: usize,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>, num_domains: usize) -> Result<Self> {
        let schema = Self { fields, num_domains };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let domain_fields = self
            .fields
            .iter()
            .filter(|f| f.role == FieldRole::DomainId)
            .count();
        if domain_fields != 1 {
            return Err(Error::InvalidArgument(format!(
                "schema needs exactly one domain-id field, found {domain_fields}"
            )));
        }
        if let Some(f) = self.fields.iter().find(|f| f.vocab_size == 0) {
            return Err(Error::InvalidArgument(format!("field `{}` has an empty vocabulary", f.name)));
        }
        if self.num_domains == 0 {
            return Err(Error::InvalidArgument("schema has zero domains".into()));
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn domain_field(&self) -> usize {
        self.fields
            .iter()
            .position(|f| f.role == FieldRole::DomainId)
            .expect("validated schema has a domain-id field")
    }

    /// Fields whose roles mark them as prior (domain-unrelated gating) inputs:
    /// the first user, item and domain-id fields.
    pub fn default_prior_fields(&self) -> Vec<usize> {
        [FieldRole::User, FieldRole::Item, FieldRole::DomainId]
            .iter()
            .filter_map(|role| self.fields.iter().position(|f| f.role == *role))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// One categorical id per schema field, in schema order.
    pub ids: Vec<u32>,
    pub domain: usize,
    pub label: u8,
    pub user_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(schema: Schema, samples: Vec<Sample>) -> Result<Self> {
        schema.validate()?;
        let ds = Self { schema, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let f = self.schema.num_fields();
        for (i, s) in self.samples.iter().enumerate() {
            if s.ids.len() != f {
                return Err(Error::InvalidArgument(format!("sample {i} has {} ids, expected {f}", s.ids.len())));
            }
            if s.domain >= self.schema.num_domains {
                return Err(Error::InvalidArgument(format!("sample {i} has domain {} >= {}", s.domain, self.schema.num_domains)));
            }
            if s.label > 1 {
                return Err(Error::InvalidArgument(format!("sample {i} has label {}", s.label)));
            }
            for (field, &id) in self.schema.fields.iter().zip(&s.ids) {
                if id as usize >= field.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i}: id {id} out of vocabulary for `{}` ({})",
                        field.name, field.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.schema.num_domains
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_domains];
        for s in &self.samples {
            counts[s.domain] += 1;
        }
        counts
    }

    /// Hex SHA-256 over the schema and every sample.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        for s in &self.samples {
            for id in &s.ids {
                h.update(id.to_le_bytes());
            }
            h.update((s.domain as u64).to_le_bytes());
            h.update([s.label]);
            h.update(s.user_id.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Domain-stratified random split; returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); self.schema.num_domains];
        for (i, s) in self.samples.iter().enumerate() {
            by_domain[s.domain].push(i);
        }
        let mut is_test = vec![false; self.samples.len()];
        for rows in &mut by_domain {
            rows.shuffle(&mut rng);
            let n_test = (rows.len() as f64 * test_fraction).round() as usize;
            for &r in &rows[..n_test] {
                is_test[r] = true;
            }
        }
        let pick = |want: bool| Dataset {
            schema: self.schema.clone(),
            samples: self
                .samples
                .iter()
                .zip(&is_test)
                .filter(|(_, &t)| t == want)
                .map(|(s, _)| s.clone())
                .collect(),
        };
        Ok((pick(false), pick(true)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
