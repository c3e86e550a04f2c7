//! Command-line experiment runner: training, evaluation, multi-seed
//! comparison and gradient checking.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 numeric abort (non-finite loss).

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::{DataSource, ExperimentConfig};
