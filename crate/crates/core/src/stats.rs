//! Significance tests over per-seed results.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than 2 values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub mean_diff: f64,
    /// `H1: mean(a − b) > 0`.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Paired t-test of `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "paired_t_test", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.len() as f64;
    let m = mean(&diff);
    let sd = std_dev(&diff);
    let df = n - 1.0;
    if sd == 0.0 {
        let (g, two) = match m.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (0.0, 0.0),
            Some(std::cmp::Ordering::Less) => (1.0, 0.0),
            _ => (0.5, 1.0),
        };
        return Ok(TTest { t: m.signum() * f64::INFINITY, df, mean_diff: m, p_greater: g, p_two_sided: two });
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_greater = 1.0 - dist.cdf(t);
    let p_two_sided = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, df, mean_diff: m, p_greater, p_two_sided })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTest {
    pub u: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// Two-sided Mann–Whitney U test, normal approximation with tie correction
/// and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<RankTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("mann_whitney_u"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_a += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let u = rank_a - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankTest { u, z: 0.0, p_two_sided: 1.0 });
    }
    let diff = (u - mu).abs() - 0.5;
    let z = diff.max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(RankTest { u, z, p_two_sided: (2.0 * (1.0 - normal.cdf(z))).min(1.0) })
}
