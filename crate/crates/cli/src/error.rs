use std::path::{Path, PathBuf};

use kimlab_core::invariant::InvariantError;
use kimlab_core::lyapunov::LyapunovError;
use kimlab_core::metrics::MetricError;
use kimlab_core::operator::ModelError;
use kimlab_core::sde1d::SimError;
use thiserror::Error;

/// Every failure maps onto one of three exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn validation(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Validation {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    /// Attach a config field name to a validation error raised deeper down.
    pub fn in_field(self, field: &str) -> Self {
        match self {
            CliError::Validation { field: f, message } if f.is_empty() => CliError::Validation {
                field: field.to_string(),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<InvariantError> for CliError {
    fn from(e: InvariantError) -> Self {
        match e {
            InvariantError::OutsideInterior(_) | InvariantError::GridTooSmall(_) => {
                CliError::validation("", e)
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Invariant(inner) => inner.into(),
            other => CliError::validation("model", other),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Step { .. } => CliError::Numerical(e.to_string()),
            SimError::Config(_) => CliError::validation("scheme", e),
            SimError::NotMixedFamily(_) => CliError::validation("model", e),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::InsufficientPoints { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::validation("", e),
        }
    }
}

impl From<LyapunovError> for CliError {
    fn from(e: LyapunovError) -> Self {
        match e {
            LyapunovError::Model(m) => m.into(),
            LyapunovError::Invariant(i) => i.into(),
            LyapunovError::NoRecipe { .. }
            | LyapunovError::NotApplicable(_)
            | LyapunovError::GridTooSmall(_) => CliError::validation("model", e),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
