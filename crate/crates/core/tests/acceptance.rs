//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its detail. `cargo test -p sparseloco --test acceptance` runs all of
//! them; the `verify` CLI subcommand executes the same checks with timing.

use sparseloco::verify;

fn run(name: &str) {
    let results = verify::run_checks(Some(name));
    assert_eq!(results.len(), 1, "check {name} not found");
    let r = &results[0];
    println!(
        "{} {} ({:.2}s): {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.seconds,
        r.detail
    );
    assert!(r.passed, "{}: {}", r.name, r.detail);
}

#[test]
fn c01_orthonormality_and_projector() {
    run("orthonormality_and_projector");
}

#[test]
fn c02_topk_full_sort_oracle() {
    run("topk_full_sort_oracle");
}

#[test]
fn c03_error_feedback_conservation() {
    run("error_feedback_conservation");
}

#[test]
fn c04_pipeline_equivalence() {
    run("pipeline_equivalence");
}

#[test]
fn c05_gradient_finite_differences() {
    run("gradient_finite_differences");
}

#[test]
fn c06_degenerate_adamw_equivalence() {
    run("degenerate_adamw_equivalence");
}

#[test]
fn c07_subspace_roundtrip() {
    run("subspace_roundtrip");
}

#[test]
fn c08_embedding_split_reprojection() {
    run("embedding_split_reprojection");
}

#[test]
fn c09_heterogeneous_mixture_identity() {
    run("heterogeneous_mixture_identity");
}

#[test]
fn c10_degenerate_alpha_trace_identity() {
    run("degenerate_alpha_trace_identity");
}

#[test]
fn c11_perf_utilization_checkpoint() {
    run("perf_utilization_checkpoint");
}

#[test]
fn c12_byte_meter_agreement() {
    run("byte_meter_agreement");
}

#[test]
fn c13_training_trends() {
    run("training_trends");
}

#[test]
fn c14_golden_wire_formats() {
    run("golden_wire_formats");
}
