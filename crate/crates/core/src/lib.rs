//! Functional simulator, compiler and tooling for a sparse mixed-bit-width
//! CNN accelerator.

pub mod array;
pub mod cli;
pub mod cmul;
pub mod compiler;
pub mod error;
pub mod golden;
pub mod perf;
pub mod quant;
pub mod report;
pub mod signal;

pub use error::{Error, Result};
