mod common;

use common::gumbel::*;

#[test]
fn gumbel_max_matches_target_frequencies() {
    let gap = frequency_gap(100_000);
    assert!(gap < 0.01, "L∞ = {gap}");
}

#[test]
fn gumbel_mean_is_euler_gamma() {
    let mean = sample_mean(1_000_000);
    assert!((mean - EULER_GAMMA).abs() < 0.005, "mean {mean}");
}

#[test]
fn relaxation_argmax_is_temperature_invariant() {
    assert_eq!(argmax_mismatches(500), 0);
}

#[test]
fn straight_through_backward_equals_soft_backward() {
    let gap = straight_through_gap(50);
    assert!(gap < 1e-10, "gap {gap}");
}
