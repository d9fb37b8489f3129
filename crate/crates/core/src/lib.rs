pub mod config;
pub mod engine;
pub mod error;
pub mod harness;
pub mod nn;
pub mod parallel;
pub mod seeds;
pub mod tasks;
pub mod tensor;

pub use error::{PmnError, Result};
