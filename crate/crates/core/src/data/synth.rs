//! Planted-affinity generator for imbalanced multi-domain click data.
//!
//! Every user and item carries a latent factor; items inherit most of their
//! factor from a category. The affinity of a (user, item) pair is the scaled
//! dot product of the two factors and the label is its sign, flipped with a
//! small noise probability. Cross-domain conflict is planted per
//! (user, category): with probability `conflict_rate` one ordered domain pair
//! `(s1, s2)` is drawn and the affinity in `s2` is negated, so the pair's
//! affinities in `s1` and `s2` have opposite signs.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FieldRole, FieldSchema, Sample, Schema};
use crate::error::{Error, Result};

/// Per-domain sample volumes (millions) of a public five-domain short-video
/// dataset, used as generation ratios.
pub const KUAIRAND_RATIOS: [f64; 5] = [2.4, 7.8, 0.4, 0.9, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub domain_sizes: Vec<usize>,
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_contexts: usize,
    pub latent_dim: usize,
    /// Zipf exponent of item popularity.
    pub item_skew: f64,
    pub conflict_rate: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domain_sizes: Self::kuairand_sizes(5000.0),
            num_users: 1000,
            num_items: 2000,
            num_categories: 20,
            num_contexts: 24,
            latent_dim: 8,
            item_skew: 0.8,
            conflict_rate: 0.3,
            label_noise: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Domain sizes proportional to [`KUAIRAND_RATIOS`], `per_unit` samples per
    /// ratio unit.
    pub fn kuairand_sizes(per_unit: f64) -> Vec<usize> {
        KUAIRAND_RATIOS.iter().map(|r| (r * per_unit).round() as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 domains, got {}",
                self.domain_sizes.len()
            )));
        }
        if self.domain_sizes.contains(&0) {
            return Err(Error::InvalidArgument("domain sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return Err(Error::InvalidArgument(format!("conflict rate {} not in [0, 1]", self.conflict_rate)));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::InvalidArgument(format!("label noise {} not in [0, 0.5]", self.label_noise)));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_categories == 0 || self.num_contexts == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument("entity counts must be positive".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let field = |name: &str, vocab_size, role| FieldSchema { name: name.into(), vocab_size, role };
        Schema {
            fields: vec![
                field("user_id", self.num_users + 1, FieldRole::User),
                field("item_id", self.num_items + 1, FieldRole::Item),
                field("category", self.num_categories + 1, FieldRole::Item),
                field("context", self.num_contexts + 1, FieldRole::Context),
                field("domain", self.domain_sizes.len(), FieldRole::DomainId),
            ],
            num_domains: self.domain_sizes.len(),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a dataset; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s_count = spec.domain_sizes.len();
    let r = spec.latent_dim;

    let users: Vec<Vec<f64>> = (0..spec.num_users).map(|_| normal_vec(&mut rng, r)).collect();
    let categories: Vec<Vec<f64>> = (0..spec.num_categories).map(|_| normal_vec(&mut rng, r)).collect();
    let item_category: Vec<usize> = (0..spec.num_items).map(|_| rng.random_range(0..spec.num_categories)).collect();
    let items: Vec<Vec<f64>> = item_category
        .iter()
        .map(|&g| {
            let noise = normal_vec(&mut rng, r);
            categories[g].iter().zip(noise).map(|(c, e)| c + 0.5 * e).collect()
        })
        .collect();

    // Flipped domain per (user, category), if any.
    let flips: Vec<Option<usize>> = (0..spec.num_users * spec.num_categories)
        .map(|_| {
            if rng.random::<f64>() < spec.conflict_rate {
                let s1 = rng.random_range(0..s_count);
                let s2 = (s1 + rng.random_range(1..s_count)) % s_count;
                Some(s2)
            } else {
                None
            }
        })
        .collect();

    let weights: Vec<f64> = (0..spec.num_items).map(|k| ((k + 1) as f64).powf(-spec.item_skew)).collect();
    let item_dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let scale = 1.0 / (r as f64).sqrt();

    let total: usize = spec.domain_sizes.iter().sum();
    let mut samples = Vec::with_capacity(total);
    for (domain, &size) in spec.domain_sizes.iter().enumerate() {
        for _ in 0..size {
            let u = rng.random_range(0..spec.num_users);
            let i = item_dist.sample(&mut rng);
            let g = item_category[i];
            let ctx = rng.random_range(0..spec.num_contexts);
            let mut affinity: f64 = users[u].iter().zip(&items[i]).map(|(a, b)| a * b).sum::<f64>() * scale;
            if flips[u * spec.num_categories + g] == Some(domain) {
                affinity = -affinity;
            }
            let mut label = (affinity > 0.0) as u8;
            if rng.random::<f64>() < spec.label_noise {
                label ^= 1;
            }
            samples.push(Sample {
                ids: vec![u as u32 + 1, i as u32 + 1, g as u32 + 1, ctx as u32 + 1, domain as u32],
                domain,
                label,
                user_id: u as u32 + 1,
            });
        }
    }
    Dataset::new(spec.schema(), samples)
}
