//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test -p dcsst-core --test acceptance -- 2 5` runs a subset.

#[path = "../common/mod.rs"]
mod common;

mod diffusion;
mod gradients;
mod learning;
mod mechanisms;
mod metrics;
mod reproducibility;
mod trainer;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one sub-check: `Ok(detail)` or `Err(reason)`.
pub type Check = (String, Result<String, String>);

pub fn check(name: &str, ok: bool, detail: String) -> Check {
    (name.to_string(), if ok { Ok(detail) } else { Err(detail) })
}

/// Turns a library error or panic inside a sub-check into a failure.
pub fn guard(name: &str, f: impl FnOnce() -> dcsst::Result<Check>) -> Check {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(c)) => c,
        Ok(Err(e)) => (name.to_string(), Err(format!("error: {e}"))),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (name.to_string(), Err(format!("panicked: {msg}")))
        }
    }
}

type Criterion = (usize, &'static str, fn() -> Vec<Check>);

const CRITERIA: [Criterion; 7] = [
    (1, "gradient integrity", gradients::run),
    (2, "metric oracle equivalence", metrics::run),
    (3, "training-loop fidelity", trainer::run),
    (4, "mechanism reductions", mechanisms::run),
    (5, "diffusion correctness", diffusion::run),
    (6, "desk-scale learning behaviour", learning::run),
    (7, "reproducibility", reproducibility::run),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut summary = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        println!("criterion {id}: {name}");
        let checks = run();
        let ok = !checks.is_empty() && checks.iter().all(|c| c.1.is_ok());
        for (sub, res) in &checks {
            match res {
                Ok(d) => println!("    ok      {sub}: {d}"),
                Err(d) => println!("    FAILED  {sub}: {d}"),
            }
        }
        let line = format!(
            "{} criterion {id} ({name}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}\n");
        summary.push(line);
        if !ok {
            failed += 1;
        }
    }
    println!("summary:");
    for l in &summary {
        println!("  {l}");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
