use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate intensity range: volume is constant ({value})")]
    DegenerateIntensity { value: f32 },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("crop {origin:?}+{size:?} lies outside volume {shape:?}")]
    OutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        shape: [usize; 3],
    },

    #[error("coordinate {coord:?} outside grid {grid:?}")]
    CoordinateOutOfGrid { coord: [f64; 3], grid: [usize; 3] },

    #[error(
        "spatial size {dims:?} not divisible by {factor}; pad to {padded:?}"
    )]
    NotDivisible {
        dims: [usize; 3],
        factor: usize,
        padded: [usize; 3],
    },

    #[error("missing {0} volume")]
    MissingModality(&'static str),

    #[error("unknown atlas subregion `{name}`; valid names: {valid}")]
    UnknownSubregion { name: String, valid: String },

    #[error("non-finite loss term {term} = {value}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        step: Option<usize>,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Config(String),

    #[error("metric floor not met: {0}")]
    MetricFloor(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
