//! Command-line runner for FlickerWorld: data generation, base and plug-in
//! training, evaluation, ablations and multi-run reports.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod hash;
pub mod pipeline;
pub mod report;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::{CliError, Result};
