#[allow(dead_code)]
#[path = "../gradients.rs"]
mod suite;

use crate::Outcome;

pub fn run() -> Outcome {
    crate::guard(suite::criterion)
}
