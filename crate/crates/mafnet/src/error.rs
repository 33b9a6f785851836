//! Error types shared across the toolkit.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps variants onto stable process exit codes, so new variants
/// must be added to [`Error::exit_code`] as well.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or unrecognized file contents (bad magic, truncated payload,
    /// unsupported version or dtype, inconsistent header fields).
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid input with unusable values (NaN/Inf voxels, values
    /// outside a declared range, band counts too small to process).
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Dimension mismatch or dimensions outside an operation's domain.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid hyperparameter or argument value.
    #[error("param error: {0}")]
    Param(String),

    /// Unparseable or contradictory configuration input.
    #[error("config error: {0}")]
    Config(String),

    /// Normalization asked to divide by a zero value range.
    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    /// Training produced a non-finite loss. Carries enough context to replay
    /// the offending batch.
    #[error("divergence in stage {stage} at epoch {epoch}, step {step} (batch seed {batch_seed})")]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },
}

impl Error {
    /// Convenience constructor tying an [`std::io::Error`] to its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error class.
    ///
    /// 2 = bad arguments/config, 3 = I/O, 4 = data/shape/format, 5 = divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_)
            | Error::Data(_)
            | Error::Shape(_)
            | Error::DegenerateRange(_) => 4,
            Error::Divergence { .. } => 5,
        }
    }
}
