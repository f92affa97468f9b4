#[allow(dead_code)]
#[path = "../attacks.rs"]
mod suite;

use crate::Outcome;

pub fn run() -> Outcome {
    crate::guard(suite::criterion)
}
