use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied a non-finite value or an index out of range.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("object placement failed after {attempts} attempts")]
    Placement { attempts: usize },

    /// Zero-norm rows, empty batches and similar.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An operation was called on a model with the wrong head.
    #[error("head mode mismatch: expected {expected}, model has {actual}")]
    HeadMode {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("symbol {code} is not realizable: best residual {residual:.4} exceeds the acceptance bound")]
    Distillation { code: String, residual: f64 },

    #[error("test-set generation retained {retained} of {requested} rows after {attempts} attempts")]
    Generation {
        requested: usize,
        retained: usize,
        attempts: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// Two artifacts (or an artifact and the active config) were produced
    /// under different configurations.
    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    ConfigMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    /// The artifact exists but cannot be decoded.
    #[error("malformed {kind} artifact: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, detail: impl ToString) -> Self {
        Error::Format {
            kind,
            detail: detail.to_string(),
        }
    }
}
