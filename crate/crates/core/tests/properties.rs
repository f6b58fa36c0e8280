mod support;

use support::criteria::*;

#[test]
fn other_groups_get_exactly_zero_gradient() {
    for seed in 0..3 {
        let r = gradient_isolation(seed);
        assert!(r.checked > 0);
        assert_eq!(r.violations, 0, "{r:?}");
        assert_eq!(r.dead_own_groups, 0, "{r:?}");
    }
}

#[test]
fn admissible_permutations_preserve_outputs() {
    for seed in 0..3 {
        let d = permutation_max_diff(seed);
        assert!(d < 1e-6, "seed {seed}: {d:e}");
    }
}

#[test]
fn aggregation_algebra_holds() {
    let r = aggregation_algebra(5);
    assert!(r.idempotence <= 1e-12, "{r:?}");
    assert!(r.order_bitwise, "{r:?}");
    assert!(r.exclusion_exact, "{r:?}");
    assert!(r.masked_oracle <= 1e-6, "{r:?}");
    assert!(r.single_group_vs_fedavg <= 1e-12, "{r:?}");
}

#[test]
fn preferences_match_per_sample_oracle() {
    let r = interpretation_oracles(2);
    assert!(r.batched_vs_oracle <= 1e-5, "{r:?}");
    assert!(r.tv_matches_oracle, "{r:?}");
    assert!(r.tv_permutation_bitwise, "{r:?}");
}

#[test]
fn fedprox_reduces_to_fedavg_and_has_proximal_gradient() {
    let r = fedprox_checks(4);
    assert!(r.zero_mu_bitwise);
    assert!(r.gradient_error <= 1e-6, "{r:?}");
}

#[test]
fn extreme_trimming_runs_and_tracks_provenance() {
    let r = extreme_trimming(7, 2);
    assert_eq!(r.rounds_completed, 2, "{r:?}");
    assert!(r.params_smaller && r.bytes_smaller && r.provenance_exact, "{r:?}");
}
