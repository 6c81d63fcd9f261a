//! Command implementations and the local HTTP service behind the `mulcpred`
//! binary.

pub mod commands;
pub mod config;
pub mod server;
pub mod service;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] mulcpred::Error),
}

impl CliError {
    /// 2 for validation failures, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
