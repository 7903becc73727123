//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Io` maps to process exit code 2, everything else to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both offending shapes.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A caller-facing contract was violated (non-scalar backward root,
    /// non-finite loss component, checkpoint hash mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid input data or arguments.
    #[error("invalid input: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for I/O failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a `Dimension` error from two shape slices.
pub fn dim_error(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: format!("{lhs:?}"),
        rhs: format!("{rhs:?}"),
    }
}
