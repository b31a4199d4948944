//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. Variants map
//! onto the failure classes surfaced by the CLI: configuration problems,
//! bad or inconsistent input data, and numerical failures of the iterative
//! algorithms.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is structurally valid but degenerate for the requested
    /// operation (constant volume, empty overlap, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A label grid contained no foreground voxels.
    #[error("empty foreground: no nonzero labels in grid")]
    EmptyForeground,

    /// A nonzero label had no entry in the intensity reassignment table.
    #[error("missing label {0} in reassignment table")]
    MissingLabel(u16),

    /// Two grids that must share dims/spacing/origin do not.
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    /// Displacement-field inversion did not reach the residual target.
    #[error("field inversion failed: residual {residual_voxels} voxels after {iterations} iterations")]
    InversionFailure {
        residual_voxels: f64,
        iterations: usize,
    },

    /// Linear or diffeomorphic registration could not proceed.
    #[error("registration failed: {0}")]
    RegistrationFailure(String),

    /// Log-Euclidean averaging of affine transforms failed.
    #[error("transform averaging failed: {0}")]
    AveragingFailure(String),

    /// Mesh alignment (ICP) diverged.
    #[error("alignment failed: {0}")]
    AlignmentFailure(String),

    /// An iterative numerical method produced non-finite values.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Requested explained-variance threshold exceeds the model's total.
    #[error("threshold {threshold} not reachable: model captures {captured}")]
    ThresholdNotReachable { threshold: f64, captured: f64 },

    /// Synthetic phantom generation could not satisfy its invariants.
    #[error("phantom generation failed: {0}")]
    GenerationFailure(String),

    /// Malformed configuration or manifest.
    #[error("config error: {0}")]
    Config(String),

    /// File format violation (MetaImage, PLY, model blobs).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Failure class used by the CLI to pick its exit status.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::InvalidArgument(_)
            | Error::DegenerateInput(_)
            | Error::EmptyForeground
            | Error::MissingLabel(_)
            | Error::GeometryMismatch(_)
            | Error::Format { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::InversionFailure { .. }
            | Error::RegistrationFailure(_)
            | Error::AveragingFailure(_)
            | Error::AlignmentFailure(_)
            | Error::NumericalFailure(_)
            | Error::ThresholdNotReachable { .. }
            | Error::GenerationFailure(_) => ErrorClass::Numerical,
        }
    }
}

/// Coarse failure classes, one per CLI exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}
