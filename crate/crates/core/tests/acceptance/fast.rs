#[allow(dead_code)]
#[path = "../fast_inner_max.rs"]
mod suite;

use crate::Outcome;

pub fn run() -> Outcome {
    crate::guard(suite::criterion)
}
