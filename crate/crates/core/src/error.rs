use std::path::PathBuf;

use crate::gaussian::ParamGroup;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion of gaussian {index} has zero norm")]
    DegenerateRotation { index: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular 2D covariance (det = {det})")]
    SingularCovariance { det: f64 },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("frozen parameter group {0:?} changed")]
    FrozenParameterChanged(ParamGroup),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("diverged at iteration {iteration}: total loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("no valid depth pixels to initialize from")]
    NoValidPixels,

    #[error("could not place {what} after {attempts} attempts")]
    InfeasiblePacking { what: String, attempts: usize },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors raised while reading or writing the binary formats in [`crate::io`].
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual} (first missing byte at offset {actual})")]
    Truncated { expected: usize, actual: usize },

    #[error("size mismatch: header implies {expected} bytes but file has {actual} (trailing data at offset {expected})")]
    CountMismatch { expected: usize, actual: usize },

    #[error("invalid header field `{field}` at offset {offset}: {value}")]
    InvalidHeader {
        field: &'static str,
        offset: usize,
        value: u64,
    },

    #[error("map has zero channels")]
    ZeroChannels,

    #[error("malformed text record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}
