//! Pass/fail bookkeeping for the acceptance target in `tests/acceptance.rs`.
//!
//! Every criterion is run, even after a failure, and prints one line.

use std::fmt;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {} ({:.1}s of {}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs(),
        )
    }
}

/// A check returns whether its thresholds held and a one-line summary. An
/// `Err` is a failure. Overrunning `limit` fails the criterion too.
pub fn run_criterion<F>(id: usize, name: &'static str, limit: Duration, check: F) -> Outcome
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let start = Instant::now();
    let (ok, mut detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    if !in_time {
        detail.push_str("; over the time limit");
    }
    let outcome = Outcome { id, name, passed: ok && in_time, detail, elapsed, limit };
    println!("{outcome}");
    outcome
}

/// Prints the tally and returns the process exit status.
pub fn finish(outcomes: &[Outcome]) -> i32 {
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        0
    } else {
        println!("failed: {}", failed.join(", "));
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_and_overruns_fail() {
        let o = run_criterion(1, "err", Duration::from_secs(1), || Err("boom".into()));
        assert!(!o.passed && o.detail.contains("boom"));
        let o = run_criterion(2, "slow", Duration::ZERO, || {
            std::thread::sleep(Duration::from_millis(2));
            Ok((true, "ok".into()))
        });
        assert!(!o.passed);
        let o = run_criterion(3, "fine", Duration::from_secs(5), || Ok((true, "ok".into())));
        assert!(o.passed && o.to_string().starts_with("[PASS] criterion  3 fine: ok"));
        assert_eq!(finish(std::slice::from_ref(&o)), 0);
    }
}
