use thiserror::Error;

/// Unified error type for the library.
///
/// Variants map onto the CLI's exit-code contract: configuration, input, shape,
/// cache, checkpoint, and query errors are usage problems (exit 2); numeric and
/// training errors are runtime problems (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A configuration (file, schedule, preset, model config) is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// KV cache misuse: factor mismatch, overlapping positions, unknown rows.
    #[error("cache error: {0}")]
    Cache(String),

    /// Malformed caller input (token ids, positions, class ids).
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced a non-finite value or left its numeric domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training failed (non-finite loss, divergence).
    #[error("training error: {0}")]
    Train(String),

    /// Checkpoint serialization, checksum, or compatibility failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 2 usage, 3 numeric/training.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Train(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
