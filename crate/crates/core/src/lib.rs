pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod target;
pub mod hyper;
pub mod amr;
pub mod parallel;
pub mod harness;
pub mod federation;
