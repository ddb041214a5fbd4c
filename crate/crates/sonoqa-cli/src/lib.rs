//! IO, file formats and command implementations for the sonoqa pipeline.
//!
//! Everything algorithmic lives in `sonoqa-core`; this crate adds PNG/PGM
//! codecs, the JSON checkpoint and dataset formats, CSV logs, wall-clock
//! timing and the five CLI subcommands.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod imageio;

use std::process::ExitCode;

/// CLI failure classes and their exit codes: usage 1, data/IO 2,
/// numerical 3 (success is 0).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
            CliError::Numeric(_) => ExitCode::from(3),
        }
    }
}

impl From<sonoqa_core::Error> for CliError {
    fn from(e: sonoqa_core::Error) -> Self {
        use sonoqa_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) | E::Shape { .. } => CliError::Usage(e.to_string()),
            E::Input(_) | E::Data(_) => CliError::Data(e.to_string()),
            E::NonFinite { .. } | E::Contract(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
