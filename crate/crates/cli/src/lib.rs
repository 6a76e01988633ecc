//! Batch driver behind the `wonham-mv` binary.
//!
//! Each subcommand is a plain function taking a [`config::LoadedConfig`] so the
//! same code paths serve the binary, the integration tests and the acceptance
//! suite.

pub mod commands;
pub mod config;
pub mod output;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] wonham_mv::Error),

    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("property suite failed: {0}")]
    Check(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for stencil failures, 4 for failed properties.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(wonham_mv::Error::Scheme(_)) => 3,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Check(_) => 4,
        }
    }
}
