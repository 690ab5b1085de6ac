//! Experiment harness for the parallel search framework: single runs,
//! sweeps, necessary-condition diagnosis and wall-clock speedup.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::{CliError, CliResult};
