//! Desk-scale adversarial distillation laboratory.
//!
//! Small MLP teachers and students, a reverse-mode tape, L∞ attacks
//! (including a fast first-order teacher-correction attack), the
//! distillation objectives of PGD-AT, TRADES, ARD, RSLAD, AdaAD, IGDM and the
//! entropy-weighted SAAD / SAAD-C losses, transferability (TAS) audits and
//! the adversarial bias–variance decomposition.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod variance;

mod fsutil;

pub use error::{Error, Result};
pub use tensor::{ProbBatch, Tensor};
