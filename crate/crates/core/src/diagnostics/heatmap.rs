use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::cross_cov_matrix;
use crate::tensor::{gemm_tn, Tensor};

use super::svg;

/// Expert-level and dimension-level covariance magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub experts: usize,
    pub dim: usize,
    /// `K×K`, entry `(p,q) = (1/d²)‖C_pᵀC_q‖₁`.
    pub expert_level: Vec<f64>,
    /// `Kd×Kd`, entry `|Σ_i C[i,a] C[i,b]|` over concatenated centered outputs.
    pub dimension_level: Vec<f64>,
}

impl Heatmaps {
    pub fn expert_off_diagonal_sum(&self) -> f64 {
        let k = self.experts;
        (0..k)
            .flat_map(|p| (0..k).map(move |q| (p, q)))
            .filter(|(p, q)| p != q)
            .map(|(p, q)| self.expert_level[p * k + q])
            .sum()
    }

    /// Writes `expert_cov.csv`, `dim_cov.csv` and their SVG renderings.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let kd = self.experts * self.dim;
        write_matrix_csv(&dir.join("expert_cov.csv"), &self.expert_level, self.experts)?;
        write_matrix_csv(&dir.join("dim_cov.csv"), &self.dimension_level, kd)?;
        fs::write(dir.join("expert_cov.svg"), svg::heatmap(&self.expert_level, self.experts, "CovLoss between experts"))?;
        fs::write(dir.join("dim_cov.svg"), svg::heatmap(&self.dimension_level, kd, "|covariance| across expert dimensions"))?;
        Ok(())
    }
}

pub fn write_matrix_csv(path: &Path, matrix: &[f64], n: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in 0..n {
        let row: Vec<String> = matrix[r * n..(r + 1) * n].iter().map(|v| format!("{v:e}")).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// `|C_allᵀ C_all|` for the column-concatenation of all centered experts.
pub fn dimension_covariance(experts: &[Tensor]) -> Result<Vec<f64>> {
    let first = experts.first().ok_or(Error::EmptyInput("dimension_covariance"))?;
    let (n, d) = (first.rows(), first.row_len());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("covariance needs at least 2 rows, got {n}")));
    }
    let kd = experts.len() * d;
    let mut all = vec![0.0; n * kd];
    for (p, e) in experts.iter().enumerate() {
        if e.shape() != [n, d] {
            return Err(Error::ShapeMismatch { op: "dimension_covariance", lhs: vec![n, d], rhs: e.shape().to_vec() });
        }
        for c in 0..d {
            let mean = (0..n).map(|i| e.at2(i, c)).sum::<f64>() / n as f64;
            for i in 0..n {
                all[i * kd + p * d + c] = e.at2(i, c) - mean;
            }
        }
    }
    let mut out = vec![0.0; kd * kd];
    gemm_tn(&all, &all, &mut out, n, kd, kd);
    out.iter_mut().for_each(|v| *v = v.abs());
    Ok(out)
}

pub fn covariance_heatmaps(experts: &[Tensor]) -> Result<Heatmaps> {
    let dimension_level = dimension_covariance(experts)?;
    Ok(Heatmaps {
        experts: experts.len(),
        dim: experts[0].row_len(),
        expert_level: cross_cov_matrix(experts)?,
        dimension_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;

    #[test]
    fn symmetric_and_duplicates() {
        let a = uniform(&[12, 3], 1.0, 1);
        let b = uniform(&[12, 3], 1.0, 2);
        let h = covariance_heatmaps(&[a.clone(), b, a]).unwrap();
        let m = &h.expert_level;
        for p in 0..3 {
            for q in 0..3 {
                assert!((m[p * 3 + q] - m[q * 3 + p]).abs() < 1e-15);
            }
        }
        assert!((m[2] - m[0]).abs() < 1e-15);
        assert_eq!(h.dimension_level.len(), 81);
    }

    #[test]
    fn block_sums_match_expert_level() {
        let e: Vec<Tensor> = (0..2).map(|s| uniform(&[9, 4], 1.0, s)).collect();
        let h = covariance_heatmaps(&e).unwrap();
        let kd = 8;
        let block: f64 = (0..4).flat_map(|a| (4..8).map(move |b| (a, b))).map(|(a, b)| h.dimension_level[a * kd + b]).sum();
        assert!((block / 16.0 - h.expert_level[1]).abs() < 1e-12);
    }

    #[test]
    fn writes_files() {
        let e: Vec<Tensor> = (0..2).map(|s| uniform(&[5, 2], 1.0, s)).collect();
        let dir = tempfile::tempdir().unwrap();
        covariance_heatmaps(&e).unwrap().write(dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("expert_cov.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(fs::read_to_string(dir.path().join("dim_cov.svg")).unwrap().starts_with("<svg"));
    }
}
