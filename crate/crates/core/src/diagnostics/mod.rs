//! Ranking metrics, representation diagnostics and their file exports.

mod diversity;
mod heatmap;
pub mod svg;

pub use diversity::{
    build_conflict_sets, conflict_sets_with, domain_expert_norms, diversity_index, expert_norms, model_diversity_index,
    percentile, ConflictSet, DiForm, DiReport, Thresholds, DEFAULT_LOWER_PCT, DEFAULT_UPPER_PCT,
};
pub use heatmap::{covariance_heatmaps, dimension_covariance, write_matrix_csv, Heatmaps};
pub use diversity::PairDi;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::tensor::Tensor;

/// Area under the ROC curve by rank sum, ties counted as one half.
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of positives, so tied average ranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as u64;
        rank_sum2 += twice_avg * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let wins2 = rank_sum2 - n_pos * (n_pos + 1);
    Some(wins2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Impression-weighted mean of per-user AUCs over users with both classes.
pub fn gauc(scores: &[f64], labels: &[f64], users: &[u32]) -> Option<f64> {
    assert!(scores.len() == labels.len() && labels.len() == users.len(), "inputs differ in length");
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &u) in users.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for rows in groups.values() {
        let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
        if let Some(a) = auc(&s, &y) {
            num += rows.len() as f64 * a;
            den += rows.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// `Σσ / max σ` of a matrix.
pub fn information_abundance(matrix: &Tensor) -> Result<f64> {
    let sv = singular_values(matrix)?;
    let max = sv.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return Err(Error::InvalidArgument("information abundance of an all-zero matrix".into()));
    }
    Ok(sv.iter().sum::<f64>() / max)
}

/// Per-domain and overall AUC/gAUC of a scored dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub auc: Vec<Option<f64>>,
    pub gauc: Vec<Option<f64>>,
    pub overall_auc: Option<f64>,
    pub overall_gauc: Option<f64>,
}

pub fn ranking_report(scores: &[f64], labels: &[f64], users: &[u32], domains: &[usize], num_domains: usize) -> RankingReport {
    let mut per = vec![Vec::new(); num_domains];
    for (i, &s) in domains.iter().enumerate() {
        per[s].push(i);
    }
    let pick = |rows: &[usize]| {
        (
            rows.iter().map(|&i| scores[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| users[i]).collect::<Vec<_>>(),
        )
    };
    let (mut a, mut g) = (Vec::new(), Vec::new());
    for rows in &per {
        let (s, y, u) = pick(rows);
        a.push(auc(&s, &y));
        g.push(gauc(&s, &y, &u));
    }
    RankingReport {
        auc: a,
        gauc: g,
        overall_auc: auc(scores, labels),
        overall_gauc: gauc(scores, labels, users),
    }
}
