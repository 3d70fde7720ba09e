//! Runs the full battery of analytical checks: the pruning-ratio lower
//! bound, the compensated-error bound, the attack-distance shift, the
//! convergence-rate bound, and the curvature estimate.

fn main() {
    let reports = dgp::cli::run_verification(42).expect("verification failed");
    for r in &reports {
        println!(
            "{:<28} measured {:>12.6}  bound {:>12.6}  {}",
            r.claim,
            r.measured,
            r.bound,
            if r.satisfied { "pass" } else { "FAIL" }
        );
    }
    assert!(reports.iter().all(|r| r.satisfied), "a check failed");
}
