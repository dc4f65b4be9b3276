//! `selftest`: finite-difference check of every primitive and composite block.

use nucleo_core::gradsuite::all_cases;

use crate::error::{CliError, CliResult};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs the suite, printing one line per case; fails with a numeric error
/// when any case exceeds [`TOLERANCE`].
pub fn selftest(mut out: impl std::io::Write) -> CliResult<Vec<CaseResult>> {
    let mut results = Vec::new();
    for case in all_cases()? {
        let r = case.run_default()?;
        let passed = r.passes(TOLERANCE) && r.checked >= case.config().probes;
        let _ = writeln!(
            out,
            "{} {:32} probes {:3} max_rel {:.2e}",
            if passed { "ok  " } else { "FAIL" },
            case.name,
            r.checked,
            r.max_rel_error
        );
        results.push(CaseResult {
            name: case.name.clone(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            passed,
        });
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
