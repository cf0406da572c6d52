mod common;

use common::checks::{ap_fixture, evaluator_sweep};

#[test]
fn matches_brute_force_oracle() {
    let bad = evaluator_sweep(200, 1);
    assert!(bad.is_empty(), "{bad:#?}");
    let bad = evaluator_sweep(2000, 2);
    assert!(bad.is_empty(), "{}", bad.len());
}

#[test]
fn hand_computed_fixture() {
    let ap = ap_fixture();
    assert_eq!(format!("{ap:.4}"), "0.8333");
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
}
