use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// A domain-mixed mini-batch in struct-of-arrays form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Dataset row of each batch position.
    pub rows: Vec<usize>,
    /// Field ids, `len × num_fields`, row-major.
    pub ids: Vec<u32>,
    pub num_fields: usize,
    pub labels: Vec<f64>,
    pub domains: Vec<usize>,
    pub user_ids: Vec<u32>,
    /// Batch positions belonging to each domain.
    pub domain_rows: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_rows(ds: &Dataset, rows: &[usize]) -> Self {
        let nf = ds.schema.num_fields();
        let mut ids = Vec::with_capacity(rows.len() * nf);
        let mut labels = Vec::with_capacity(rows.len());
        let mut domains = Vec::with_capacity(rows.len());
        let mut user_ids = Vec::with_capacity(rows.len());
        let mut domain_rows = vec![Vec::new(); ds.num_domains()];
        for (pos, &r) in rows.iter().enumerate() {
            let s = &ds.samples[r];
            ids.extend_from_slice(&s.ids);
            labels.push(s.label as f64);
            domains.push(s.domain);
            user_ids.push(s.user_id);
            domain_rows[s.domain].push(pos);
        }
        Self {
            rows: rows.to_vec(),
            ids,
            num_fields: nf,
            labels,
            domains,
            user_ids,
            domain_rows,
        }
    }

    pub fn full(ds: &Dataset) -> Self {
        let rows: Vec<usize> = (0..ds.len()).collect();
        Self::from_rows(ds, &rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn field_id(&self, pos: usize, field: usize) -> u32 {
        self.ids[pos * self.num_fields + field]
    }

    /// Labels of the given batch positions.
    pub fn labels_at(&self, positions: &[usize]) -> Vec<f64> {
        positions.iter().map(|&p| self.labels[p]).collect()
    }
}

/// Iterator over mini-batches of a dataset.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = Batch::from_rows(self.ds, &self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Splits `ds` into mini-batches, shuffled when `shuffle_seed` is given.
pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::EmptyInput("batch_iter"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn ten() -> Dataset {
        let spec = SyntheticSpec { domain_sizes: vec![6, 4], ..SyntheticSpec::default() };
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn sizes_four_four_two() {
        let ds = ten();
        let sizes: Vec<usize> = batch_iter(&ds, 4, Some(1)).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn union_is_the_dataset() {
        let ds = ten();
        let mut rows: Vec<usize> = batch_iter(&ds, 3, Some(5)).unwrap().flat_map(|b| b.rows).collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_fixed_order() {
        let ds = ten();
        let a: Vec<Batch> = batch_iter(&ds, 4, Some(3)).unwrap().collect();
        let b: Vec<Batch> = batch_iter(&ds, 4, Some(3)).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_masks_partition_batch() {
        let ds = ten();
        for b in batch_iter(&ds, 4, Some(2)).unwrap() {
            let total: usize = b.domain_rows.iter().map(Vec::len).sum();
            assert_eq!(total, b.len());
            for (s, rows) in b.domain_rows.iter().enumerate() {
                assert!(rows.iter().all(|&p| b.domains[p] == s));
            }
        }
    }

    #[test]
    fn errors() {
        let ds = ten();
        assert!(batch_iter(&ds, 0, None).is_err());
        let empty = Dataset { schema: ds.schema.clone(), samples: vec![] };
        assert!(batch_iter(&empty, 2, None).is_err());
    }
}
