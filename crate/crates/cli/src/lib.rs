//! Command-line front end for the `qent` classifier: argument parsing,
//! layered configuration, persistence formats and the command
//! implementations.

pub mod commands;
pub mod config;
pub mod formats;

use qent::boundgen::BoundGenError;
use qent::cae::CaeError;
use qent::pipeline::PipelineError;
use thiserror::Error;

pub use commands::{run, Cli};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    NoFeasible(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Dimension(_) => 4,
            CliError::Diverged(_) => 5,
            CliError::NoFeasible(_) => 6,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<formats::FormatError> for CliError {
    fn from(e: formats::FormatError) -> Self {
        match e {
            formats::FormatError::Cae(c) => c.into(),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<CaeError> for CliError {
    fn from(e: CaeError) -> Self {
        match e {
            CaeError::ShapeMismatch(_) | CaeError::UnsupportedDimension(_) => {
                CliError::Dimension(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            PipelineError::DivergedLoss { .. } => CliError::Diverged(e.to_string()),
            PipelineError::InvalidConfig(_)
            | PipelineError::WrongTrainingFamily { .. }
            | PipelineError::EmptySet => CliError::Usage(e.to_string()),
            PipelineError::Cae(c) => c.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<BoundGenError> for CliError {
    fn from(e: BoundGenError) -> Self {
        match e {
            BoundGenError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            BoundGenError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            BoundGenError::NoFeasibleState(_) => CliError::NoFeasible(e.to_string()),
            BoundGenError::Pipeline(p) => p.into(),
            BoundGenError::Cae(c) => c.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<qent::states::StateError> for CliError {
    fn from(e: qent::states::StateError) -> Self {
        CliError::Usage(e.to_string())
    }
}
