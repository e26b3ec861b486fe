//! `ssattn gradcheck`: the finite-difference suite as an operator command.

use anyhow::Result;

use ssattn_core::verify::{gradcheck_suite, OpReport};

/// Runs the suite, printing one line per op. `inject_fault` corrupts the
/// analytic gradients on purpose; a healthy harness must then report
/// failures (the negative control).
pub fn cmd_gradcheck(op_filter: Option<&str>, inject_fault: bool) -> Result<(Vec<OpReport>, bool)> {
    let fault_scale = if inject_fault { 1.5 } else { 1.0 };
    let reports = gradcheck_suite(op_filter, fault_scale)?;
    let mut all_passed = !reports.is_empty();
    for r in &reports {
        println!(
            "{:<20} max_rel_error {:>12.3e}  tol {:>8.1e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    Ok((reports, all_passed))
}
