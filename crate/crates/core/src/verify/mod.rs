//! Runnable invariant checks and the reference oracles they lean on.
//!
//! Each check is a named, self-contained function returning a
//! [`CheckOutcome`]; the CLI `verify` subcommand and the acceptance test
//! suite both drive this registry so there is exactly one implementation of
//! every threshold.

pub mod oracles;
pub mod specgen;

/// Result of one named check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{}: {} ({:.2}s) {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.details
        )
    }
}

pub(crate) fn run_check(name: &str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let start = std::time::Instant::now();
    let (passed, details) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name: name.to_string(),
        passed,
        details,
        seconds: start.elapsed().as_secs_f64(),
    }
}
