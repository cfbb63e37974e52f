use std::time::Instant;

use dcsst::gradcheck::suite::{self, DEFAULT_CASES};
use dcsst::gradcheck::{GradCheckOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};

use crate::{check, guard, Check};

pub fn run() -> Vec<Check> {
    let mut out = Vec::new();
    let started = Instant::now();
    let opts = GradCheckOptions {
        step: DEFAULT_STEP,
        tolerance: DEFAULT_TOLERANCE,
        ..Default::default()
    };
    let reports = match suite::run_all(11, DEFAULT_CASES, &opts) {
        Ok(r) => r,
        Err(e) => return vec![("suite".into(), Err(format!("error: {e}")))],
    };
    let elapsed = started.elapsed().as_secs_f64();
    for r in &reports {
        out.push(check(
            &r.name,
            r.passed(),
            format!(
                "max rel err {:.2e} over {} cases, {} coords",
                r.max_rel_err,
                r.per_input.len().max(1),
                r.coords_checked
            ),
        ));
    }
    out.push(check(
        "suite wall time",
        elapsed < 60.0,
        format!("{elapsed:.1}s for {} checks (limit 60s)", reports.len()),
    ));
    out.push(guard("fault injection detected", || {
        let bad = GradCheckOptions {
            fault_scale: 1.001,
            ..opts.clone()
        };
        let r = suite::check_module("model", 11, &bad)?;
        Ok(check(
            "fault injection detected",
            !r.passed(),
            format!("0.1% gradient fault gives rel err {:.2e}", r.max_rel_err),
        ))
    }));
    out
}
