//! Runs every acceptance criterion, prints one PASS/FAIL line each and exits
//! nonzero if any fails.

use std::process::ExitCode;

use driftopt_validation::criteria;

fn main() -> ExitCode {
    let criteria = criteria();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let out = check();
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {}",
            if out.pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
