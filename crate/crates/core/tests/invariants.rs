mod common;

use hoikd::branches::Variant;

use common::checks::distribution_sweep;

#[test]
fn randomized_distribution_invariants() {
    let bad = distribution_sweep(10_000, 0);
    assert!(bad.is_empty(), "{} violations, first: {:?}", bad.len(), bad.first());
}

#[test]
fn model_score_bundles_hold_invariants() {
    for seed in 0..6 {
        let t = common::teacher(seed);
        let f = common::two_pair_features(&t.trunk, seed + 100);
        for variant in [Variant::Full, Variant::Early, Variant::Baseline] {
            let b = common::student(&t, variant, seed).scores(&f, &t.embedding.matrix).unwrap();
            b.check(1e-5).unwrap();
        }
    }
}
