//! Dense matrix math, reverse-mode gradients, Adam, finite-difference
//! checking and seeded randomness.

mod eigen;
mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use eigen::symmetric_eigen;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradMismatch};
pub use matrix::{dot, norm, Matrix};
pub use params::{evaluate, evaluate_with_gradients, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rng::{seeded_gaussian, Rng};
pub use tape::{Tape, Var};
