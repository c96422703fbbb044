use super::{Dataset, FieldRole};

pub const DEFAULT_MIN_COUNT: usize = 10;

/// Remaps every field value seen fewer than `min_count` times to the field's
/// default id 0 and recompacts the surviving values to `1..`.
///
/// The domain-id field is left untouched since its ids are domain indices.
pub fn filter_low_frequency(ds: &Dataset, min_count: usize) -> Dataset {
    let min_count = min_count.max(1);
    let mut out = ds.clone();
    for (f, field) in ds.schema.fields.iter().enumerate() {
        if field.role == FieldRole::DomainId {
            continue;
        }
        let mut counts = vec![0usize; field.vocab_size];
        for s in &ds.samples {
            counts[s.ids[f] as usize] += 1;
        }
        let mut remap = vec![0u32; field.vocab_size];
        let mut next = 1u32;
        for (id, &c) in counts.iter().enumerate().skip(1) {
            if c >= min_count {
                remap[id] = next;
                next += 1;
            }
        }
        for s in &mut out.samples {
            s.ids[f] = remap[s.ids[f] as usize];
        }
        out.schema.fields[f].vocab_size = next as usize;
    }
    out
}
