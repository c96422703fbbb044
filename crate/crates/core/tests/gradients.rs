mod common;

use std::time::Instant;

use crocodile::Variant;

use common::{op_gradient_errors, variant_gradient_error, FD_TOL};

#[test]
fn every_operation_matches_finite_differences() {
    for (name, err) in op_gradient_errors() {
        assert!(err <= FD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_variant_total_loss_matches_finite_differences() {
    let start = Instant::now();
    for v in Variant::ALL {
        let err = variant_gradient_error(v, 1e-4);
        assert!(err <= FD_TOL, "{}: relative error {err:e}", v.name());
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn covloss_weighted_total_loss_matches_finite_differences() {
    for v in [Variant::MeMmoe, Variant::Crocodile] {
        let err = variant_gradient_error(v, 1.0);
        assert!(err <= FD_TOL, "{}: relative error {err:e}", v.name());
    }
}
