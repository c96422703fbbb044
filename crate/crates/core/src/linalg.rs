//! Singular values through a cyclic Jacobi eigensolver on the Gram matrix.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convergence threshold on the off-diagonal Frobenius norm, relative to the
/// Frobenius norm of the Gram matrix.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric `d×d` matrix (row-major), unsorted.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; d];
    }
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..MAX_SWEEPS {
        if off(&a) <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * d + p], a[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// Gram matrix `AᵀA` of a `V×d` matrix.
pub fn gram(a: &Tensor) -> Vec<f64> {
    let (v, d) = (a.shape()[0], a.shape()[1]);
    let mut g = vec![0.0; d * d];
    crate::tensor::gemm_tn(a.data(), a.data(), &mut g, v, d, d);
    g
}

/// The `min(V, d)` singular values of a `V×d` matrix, in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let [v, d] = a.shape() else {
        return Err(Error::InvalidArgument(format!(
            "singular_values expects a matrix, got {:?}",
            a.shape()
        )));
    };
    let (v, d) = (*v, *d);
    if d > v {
        return singular_values(&a.transpose2());
    }
    let mut sv: Vec<f64> = symmetric_eigenvalues(gram(a), d)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}
