//! Harness behind the `quadlab` binary.
//!
//! Every subcommand resolves one [`config::RunConfig`], runs, and hands its
//! files to an [`output::Outputs`] set that is committed atomically together
//! with a run manifest.

use std::path::PathBuf;

use thiserror::Error;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;

pub use checkpoint::ChecksumOrVersionError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] ChecksumOrVersionError),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for configuration and input validation, 2 for runtime divergence, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<quadlab::td3::Td3Error> for CliError {
    fn from(e: quadlab::td3::Td3Error) -> Self {
        match e {
            quadlab::td3::Td3Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<quadlab::env::EnvError> for CliError {
    fn from(e: quadlab::env::EnvError) -> Self {
        match e {
            quadlab::env::EnvError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
