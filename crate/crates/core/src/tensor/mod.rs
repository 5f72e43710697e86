//! Dense `f64` arrays, a reverse-mode tape and the Adam optimizer.

mod adam;
mod array;
mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::{conv2d, matmul, sigmoid, Array};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use tape::{Binary, Gradients, Tape, Unary, Var};
