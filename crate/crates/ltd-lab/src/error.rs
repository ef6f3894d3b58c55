//! Crate-wide error type.
//!
//! The CLI maps these variants onto exit codes: config-class errors
//! (`InvalidShape`, `InvalidSpec`, `InvalidConfig`, `InvalidInput`) exit 2,
//! file-class errors (`Io`, `Format`) exit 3, and `Numerical` exits 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not match the operation's contract.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A scene spec field violates its invariant.
    #[error("invalid spec: field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    /// A config value is out of range, unknown, or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An input value violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A tensor file is malformed; `field` names the offending header field.
    #[error("format error in {path}: {field}: {reason}")]
    Format {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A loss or tensor went non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidShape(_)
            | Error::InvalidSpec { .. }
            | Error::InvalidConfig(_)
            | Error::InvalidInput(_) => 2,
            Error::Io(_) | Error::Format { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
