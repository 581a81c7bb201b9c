//! Randomized invariants of the screening, thresholding, covariance, OLS and
//! correlation building blocks. The suites themselves live in
//! `common/props.rs` so the acceptance target can rerun them.

mod common;
use common::props;

fn check(r: Result<(), String>) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn screening_monotone() {
    check(props::screening_monotone());
}

#[test]
fn screening_scale_equivariant() {
    check(props::screening_scale_equivariant());
}

#[test]
fn screening_boundary_excluded() {
    check(props::screening_boundary_excluded());
}

#[test]
fn screening_empty_iff_zero() {
    check(props::screening_empty_iff_zero());
}

#[test]
fn thresholding_conditions() {
    check(props::thresholding_conditions());
}

#[test]
fn chosen_covariance_pd() {
    check(props::chosen_covariance_pd());
}

#[test]
fn ols_matches_normal_equations() {
    check(props::ols_matches_normal_equations());
}

#[test]
fn pair_correlations_brute_force() {
    check(props::pair_correlations_brute_force());
}

#[test]
fn correlation_scale_invariant() {
    check(props::correlation_scale_invariant());
}

#[test]
fn j1_order_invariant() {
    check(props::j1_order_invariant());
}

#[test]
fn combined_dominates_pivotal() {
    check(props::combined_dominates_pivotal());
}

#[test]
fn wald_permutation_invariant() {
    check(props::wald_permutation_invariant());
}
