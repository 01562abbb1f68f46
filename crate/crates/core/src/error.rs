//! Error taxonomy shared by the whole toolkit.
//!
//! Every failure is classified so the CLI can map it onto a stable exit
//! code: validation/configuration problems exit with 2, missing upstream
//! artifacts with 3, and training/inference faults with 4.

use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum LdctError {
    /// Bad input data or parameters (shape mismatches, out-of-range values,
    /// malformed files). Exit code 2.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent configuration (geometry/checkpoint incompatibilities,
    /// schedule invariant violations). Exit code 2.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// A required upstream artifact is missing; the message names the
    /// command that produces it. Exit code 3.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// Training or inference produced non-finite values or diverged.
    /// Exit code 4.
    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LdctError {
    pub fn validation(msg: impl Into<String>) -> Self {
        LdctError::Validation(msg.into())
    }

    pub fn configuration(msg: impl Into<String>) -> Self {
        LdctError::Configuration(msg.into())
    }

    pub fn dependency(msg: impl Into<String>) -> Self {
        LdctError::Dependency(msg.into())
    }

    pub fn training_fault(msg: impl Into<String>) -> Self {
        LdctError::TrainingFault(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LdctError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            LdctError::Validation(_) | LdctError::Configuration(_) | LdctError::Io { .. } => 2,
            LdctError::Dependency(_) => 3,
            LdctError::TrainingFault(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, LdctError>;
