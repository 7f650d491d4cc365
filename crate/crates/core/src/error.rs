//! Error type shared by every module of the crate.

use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Synthesis,
    Verification,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("synthesis failed in {stage}: {reason}")]
    Synthesis { stage: String, reason: String },

    #[error("integration failed in segment {segment} at t = {time}: {reason}")]
    Integration {
        segment: usize,
        time: f64,
        reason: String,
    },

    #[error("no convergence after {iterations} iterations (marginal violation {violation:e})")]
    NoConvergence { iterations: usize, violation: f64 },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension { .. } | Error::Invalid(_) | Error::Precondition(_) | Error::Format(_) => {
                ErrorKind::Validation
            }
            Error::Synthesis { .. } | Error::Integration { .. } | Error::NoConvergence { .. } => {
                ErrorKind::Synthesis
            }
            Error::Verification(_) => ErrorKind::Verification,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn synth(stage: &str, reason: impl Into<String>) -> Self {
        Error::Synthesis {
            stage: stage.to_string(),
            reason: reason.into(),
        }
    }

    /// Prefix the stage of a synthesis error with an outer context.
    pub fn in_stage(self, outer: &str) -> Self {
        match self {
            Error::Synthesis { stage, reason } => Error::Synthesis {
                stage: format!("{outer}/{stage}"),
                reason,
            },
            Error::Integration {
                segment,
                time,
                reason,
            } => Error::Synthesis {
                stage: outer.to_string(),
                reason: format!("integration failed in segment {segment} at t = {time}: {reason}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
