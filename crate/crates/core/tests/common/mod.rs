#![allow(dead_code)]

pub mod e2e;
pub mod invariants;
pub mod oracles;
pub mod scp;

use std::time::Instant;

use proptest::strategy::Strategy;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

/// Outcome of one named check: a summary line or a failure message.
pub type Check = Result<String, String>;

pub const CASES: u32 = 128;

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_algorithm: RngAlgorithm::ChaCha,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// Runs `test` over `CASES` seeded draws of `strategy`.
pub fn property<S, F>(name: &str, strategy: S, test: F) -> Check
where
    S: Strategy,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    runner(CASES)
        .run(&strategy, test)
        .map(|()| format!("{name}: {CASES} cases"))
        .map_err(|e| format!("{name}: {e}"))
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

pub fn lift<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

/// Joins the outcomes of every check; any failure fails the whole.
pub fn all(checks: Vec<Check>) -> Check {
    let (ok, bad): (Vec<_>, Vec<_>) = checks.into_iter().partition(Result::is_ok);
    if bad.is_empty() {
        Ok(ok.into_iter().map(Result::unwrap).collect::<Vec<_>>().join("; "))
    } else {
        Err(bad.into_iter().map(Result::unwrap_err).collect::<Vec<_>>().join("; "))
    }
}

/// Runs `f` and appends the elapsed time, failing past `budget_s`.
pub fn timed(budget_s: f64, f: impl FnOnce() -> Check) -> Check {
    let t0 = Instant::now();
    let out = f();
    let secs = t0.elapsed().as_secs_f64();
    match out {
        Ok(s) if secs <= budget_s => Ok(format!("{s} in {secs:.1}s")),
        Ok(s) => Err(format!("{s} but took {secs:.1}s (budget {budget_s}s)")),
        Err(e) => Err(format!("{e} ({secs:.1}s)")),
    }
}

pub fn assert_check(c: Check) {
    match c {
        Ok(s) => println!("{s}"),
        Err(e) => panic!("{e}"),
    }
}
