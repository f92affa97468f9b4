//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! `ADLAB_ACCEPTANCE=decomposition,avar-sweep` restricts the run to the named criteria.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod algebra;
mod attacks;
mod avar_sweep;
mod determinism;
mod fast;
mod gradients;
mod identities;
mod sharpened;

use std::process::ExitCode;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "decomposition", budget: Some(Duration::from_secs(5)), run: identities::decomposition },
        Criterion { name: "tas-bound", budget: Some(Duration::from_secs(5)), run: identities::tas_bound },
        Criterion { name: "gradients", budget: Some(Duration::from_secs(60)), run: gradients::run },
        Criterion { name: "attacks", budget: Some(Duration::from_secs(10)), run: attacks::run },
        Criterion { name: "fast-inner-max", budget: None, run: fast::run },
        Criterion { name: "saad-algebra", budget: None, run: algebra::run },
        Criterion { name: "avar-sweep", budget: Some(Duration::from_secs(20 * 60)), run: avar_sweep::run },
        Criterion { name: "sharpened-teacher", budget: Some(Duration::from_secs(30 * 60)), run: sharpened::run },
        Criterion { name: "determinism", budget: None, run: determinism::run },
    ];
    let only: Option<Vec<String>> = std::env::var("ADLAB_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if let Some(only) = &only {
            if !only.iter().any(|o| o == c.name) {
                continue;
            }
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = (c.run)();
        let took = t0.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(d), Some(b)) if took > b => Err(format!("{d}; over budget {:?}", b)),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:<18} {:>8.1}s  {detail}", c.name, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:<18} {:>8.1}s  {detail}", c.name, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// `Err` with a formatted message when `cond` is false.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

/// Runs a panicking check, turning a panic into a failure message.
pub fn guard(f: fn() -> String) -> Outcome {
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let r = std::panic::catch_unwind(f);
    std::panic::set_hook(prev);
    r.map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}
