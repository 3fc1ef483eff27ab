//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants carry enough
//! context (layer names, file paths, line numbers) for a CLI to print a
//! actionable one-line diagnostic without a backtrace.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for model I/O, shape checking, quantization, and the
/// numerical analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure, with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Manifest or report JSON that does not parse.
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Structurally valid JSON that violates the manifest contract.
    #[error("invalid manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    /// A parameter blob whose byte length disagrees with the declared shape.
    #[error("blob {path} holds {got} values but layer {layer} expects {expected}")]
    BlobSize {
        path: PathBuf,
        layer: String,
        got: usize,
        expected: usize,
    },

    /// NaN or infinity encountered where finite values are required.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    /// Incompatible tensor shapes, reported against the layer that failed.
    #[error("layer {layer}: shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    /// Malformed dataset CSV.
    #[error("csv error at {path}:{line}: {detail}")]
    Csv {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// Class labels must be non-negative integers in a dense range.
    #[error("invalid label at {path}:{line}: {detail}")]
    Label {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// Quantization of an empty row or tensor.
    #[error("cannot quantize an empty {what}")]
    Empty { what: String },

    /// An unsupported bit-width or expansion order.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Probability mass of an interval too small to condition on.
    #[error("interval [{lo}, {hi}] carries ~zero probability mass; cannot form conditional moments")]
    EmptyMass { lo: f64, hi: f64 },

    /// Rounding optimization received no calibration rows.
    #[error("empty calibration set")]
    EmptyCalibration,

    /// The optimization objective stopped being finite.
    #[error("non-finite loss at layer {layer}, iteration {iteration}")]
    NonFiniteLoss { layer: String, iteration: usize },
}

impl Error {
    /// Wrap an `io::Error` with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
