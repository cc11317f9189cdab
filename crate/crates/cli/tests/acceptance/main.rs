//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,3,9` restricts the run to the listed criteria.

mod autodiff;
mod fixtures;
mod learning;
mod oracles;
mod pipeline;
mod sampling;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: every sub-check with its measured value.
#[derive(Default)]
pub struct Checks {
    passed: Vec<String>,
    failed: Vec<String>,
}

impl Checks {
    pub fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.passed.push(what.into());
        } else {
            self.failed.push(what.into());
        }
    }

    /// Wall-clock budget check.
    pub fn within(&mut self, what: &str, seconds: f64, budget: f64) {
        self.expect(seconds < budget, format!("{what} {seconds:.1}s < {budget:.0}s"));
    }

    fn passed(&self) -> bool {
        self.failed.is_empty()
    }

    fn summary(&self) -> String {
        if self.failed.is_empty() {
            self.passed.join("; ")
        } else {
            format!("failed: {}", self.failed.join("; "))
        }
    }
}

struct Criterion {
    id: u8,
    name: &'static str,
    run: fn(&mut Checks),
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "autodiff soundness", run: autodiff::criterion },
    Criterion { id: 2, name: "oracle equivalence", run: oracles::criterion },
    Criterion { id: 3, name: "schedule arithmetic", run: sampling::schedule_arithmetic },
    Criterion { id: 4, name: "tokenizer learning", run: learning::tokenizer_learning },
    Criterion { id: 5, name: "masked-model overfit", run: learning::masked_model_overfit },
    Criterion { id: 6, name: "decoding properties", run: sampling::decoding_properties },
    Criterion { id: 7, name: "refinement efficacy", run: learning::refinement_efficacy },
    Criterion { id: 8, name: "timing direction", run: learning::timing_direction },
    Criterion { id: 9, name: "gumbel-softmax statistics", run: sampling::gumbel_statistics },
    Criterion { id: 10, name: "reproducibility", run: pipeline::reproducibility },
];

fn selected() -> Option<Vec<u8>> {
    let only = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(only.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut failures = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let mut checks = Checks::default();
        if let Err(panic) = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut checks))) {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            checks.expect(false, format!("aborted: {msg}"));
        }
        let verdict = if checks.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} [{:>2}] {} ({:.1}s): {}",
            c.id,
            c.name,
            start.elapsed().as_secs_f64(),
            checks.summary()
        );
        ran += 1;
        failures += usize::from(!checks.passed());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
