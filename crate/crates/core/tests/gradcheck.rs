mod common;

use common::gradcheck::{critic_check, generator_check, GradReport};

fn assert_clean(r: &GradReport, min_params: usize) {
    assert!(r.checked >= min_params, "only {} parameters", r.checked);
    assert!(
        r.failures.is_empty(),
        "{} of {} mismatched:\n{}",
        r.failures.len(),
        r.checked,
        r.failures.join("\n")
    );
    // kinks are rare; a large share would point at a broken check instead
    assert!(r.kinked * 100 <= r.checked, "{} kinked of {}", r.kinked, r.checked);
}

#[test]
fn generator_objective_matches_finite_differences() {
    assert_clean(&generator_check(), 10_000);
}

#[test]
fn critic_objective_with_penalty_matches_finite_differences() {
    assert_clean(&critic_check(), 1_000);
}
