//! Command-line harness: run configuration, run directories with content
//! manifests, and the subcommands that chain corpus synthesis, pretraining,
//! adversarial training, decoding and evaluation.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use cli::run_cli;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
