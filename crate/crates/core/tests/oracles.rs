mod common;

use rand::Rng;

use crocodile::data::{SyntheticSpec, KUAIRAND_RATIOS};
use crocodile::diagnostics::{auc, gauc};
use crocodile::losses::{covloss_op_count, covloss_tensors, PairSet};
use crocodile::Tensor;

use common::*;

#[test]
fn covloss_worked_example() {
    let o = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    assert_eq!(covloss_tensors(&[o.clone(), o], PairSet::StrictCross).unwrap(), 0.5);
}

#[test]
fn covloss_matches_dense_oracle() {
    let mut r = rng(2024);
    for case in 0..100u64 {
        let k = r.random_range(2..=4);
        let d = r.random_range(1..=8);
        let n = r.random_range(2..=64);
        let experts: Vec<Tensor> = (0..k).map(|e| random(&[n, d], case * 10 + e as u64)).collect();
        for (pairs, self_blocks) in [(PairSet::StrictCross, false), (PairSet::Literal, true)] {
            let got = covloss_tensors(&experts, pairs).unwrap();
            let want = covloss_dense(&experts, self_blocks);
            assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
        }
    }
}

#[test]
fn auc_and_gauc_match_brute_force() {
    for seed in 0..200u64 {
        let (s, y, u) = scoring_instance(seed);
        assert_eq!(auc(&s, &y), auc_brute(&s, &y), "seed {seed}");
        assert_eq!(gauc(&s, &y, &u), gauc_brute(&s, &y, &u), "seed {seed}");
    }
}

#[test]
fn default_domain_sizes_follow_reference_ratios() {
    assert_eq!(KUAIRAND_RATIOS, [2.4, 7.8, 0.4, 0.9, 0.2]);
    let sizes = SyntheticSpec::default().domain_sizes;
    assert_eq!(sizes, vec![12_000, 39_000, 2_000, 4_500, 1_000]);
}

#[test]
fn sampling_cuts_covloss_work() {
    let full = covloss_op_count(1024, 16, 5, PairSet::StrictCross);
    let sampled = covloss_op_count(32, 16, 5, PairSet::StrictCross);
    let reduction = 1.0 - sampled as f64 / full as f64;
    // Row-proportional work dominates: close to 1 − 32/1024.
    assert!(reduction > 0.96 && reduction < 1.0 - 31.0 / 1024.0, "{reduction}");
}
