//! Command-line driver: config loading, run directories, subcommands and
//! run reports.

pub mod commands;
pub mod config;
pub mod report;

use thiserror::Error;

pub use commands::{run_command, Command, RunDir};
pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 2 config, 3 numerical abort, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<biembed_core::Error> for CliError {
    fn from(e: biembed_core::Error) -> Self {
        use biembed_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(m) => CliError::Config(m),
            E::NumericalAbort { .. } => CliError::Numerical(msg),
            E::Io { .. } | E::Parse { .. } => CliError::Io(msg),
            _ => CliError::Other(msg),
        }
    }
}
