use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, Sample, Schema};
use crate::error::{Error, Result};

const DOMAIN: &str = "domain";
const LABEL: &str = "label";
const USER_ID: &str = "user_id";

/// Column order: schema fields, then whichever of `domain`, `label`,
/// `user_id` the schema does not already name.
fn columns(schema: &Schema) -> Vec<String> {
    let mut cols: Vec<String> = schema.fields.iter().map(|f| f.name.clone()).collect();
    for extra in [DOMAIN, LABEL, USER_ID] {
        if !cols.iter().any(|c| c == extra) {
            cols.push(extra.to_string());
        }
    }
    cols
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let cols = columns(&ds.schema);
    let nf = ds.schema.num_fields();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", cols.join(","))?;
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        for (c, name) in cols.iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            let v = if c < nf {
                s.ids[c] as u64
            } else {
                match name.as_str() {
                    DOMAIN => s.domain as u64,
                    LABEL => s.label as u64,
                    _ => s.user_id as u64,
                }
            };
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_err(1, format!("missing column `{name}`")))
    };
    let field_cols: Vec<usize> = schema.fields.iter().map(|f| find(&f.name)).collect::<Result<_>>()?;
    let (domain_col, label_col, user_col) = (find(DOMAIN)?, find(LABEL)?, find(USER_ID)?);

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let int = |col: usize, name: &str| -> Result<u64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<u64>()
                .map_err(|_| csv_err(line, format!("column `{name}`: `{raw}` is not a non-negative integer")))
        };
        let domain = int(domain_col, DOMAIN)? as usize;
        if domain >= schema.num_domains {
            return Err(csv_err(line, format!("unknown domain id {domain} (have {})", schema.num_domains)));
        }
        let mut ids = Vec::with_capacity(field_cols.len());
        for (field, &col) in schema.fields.iter().zip(&field_cols) {
            let id = int(col, &field.name)?;
            if id as usize >= field.vocab_size {
                return Err(csv_err(
                    line,
                    format!("column `{}`: id {id} outside vocabulary of {}", field.name, field.vocab_size),
                ));
            }
            ids.push(id as u32);
        }
        let label = int(label_col, LABEL)?;
        if label > 1 {
            return Err(csv_err(line, format!("label must be 0 or 1, got {label}")));
        }
        let user_id = int(user_col, USER_ID)? as u32;
        samples.push(Sample {
            ids,
            domain,
            label: label as u8,
            user_id,
        });
    }
    Dataset::new(schema.clone(), samples)
}

pub fn save_schema(schema: &Schema, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(schema)? + "\n")?;
    Ok(())
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    let schema: Schema = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    schema.validate()?;
    Ok(schema)
}
