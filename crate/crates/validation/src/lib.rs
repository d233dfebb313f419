//! Small reporting helpers for the acceptance run.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// One named sub-check of a criterion.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Collects the sub-checks of one criterion.
#[derive(Debug, Default)]
pub struct Checks(Vec<Check>);

impl Checks {
    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Passes when `value < limit`.
    pub fn below(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.check(name, value < limit, format!("{value:.3e} < {limit:.1e}"));
    }

    pub fn eq_count(&mut self, name: impl Into<String>, got: usize, want: usize) {
        self.check(name, got == want, format!("{got} (want {want})"));
    }

    pub fn all(&self) -> &[Check] {
        &self.0
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub id: u32,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
    /// Panic message when the criterion aborted.
    pub panic: Option<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.panic.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn line(&self) -> String {
        let mut out = format!(
            "criterion {} ({}): {} [{:.2}s]",
            self.id,
            self.title,
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64()
        );
        for c in &self.checks {
            let mark = if c.passed { "ok" } else { "FAILED" };
            let _ = write!(out, " | {} {}: {}", c.name, mark, c.detail);
        }
        if let Some(p) = &self.panic {
            let _ = write!(out, " | panicked: {p}");
        }
        out
    }
}

/// Runs one criterion, catching panics and timing it. `limit` adds a
/// runtime sub-check.
pub fn run(id: u32, title: &'static str, limit: Option<Duration>, f: impl FnOnce(&mut Checks)) -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    let result = catch_unwind(AssertUnwindSafe(|| f(&mut checks)));
    let elapsed = start.elapsed();
    let panic = result.err().map(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into())
    });
    if let Some(limit) = limit {
        checks.check(
            "runtime",
            elapsed < limit,
            format!("{:.2}s < {}s", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }
    Outcome {
        id,
        title,
        checks: checks.0,
        elapsed,
        panic,
    }
}
