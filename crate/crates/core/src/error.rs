use std::path::PathBuf;

use thiserror::Error;

use crate::fixedpoint::FixedPointTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inverse transform left an imaginary residue of {residue:.3e} (relative)")]
    NonRealResult { residue: f64 },

    #[error("malformed cube header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFiniteData(&'static str),

    #[error("bad kernel parameters: {0}")]
    BadKernelParams(String),

    #[error("kernel of size {size} does not fit a {height}x{width} grid")]
    KernelTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("unknown scenario tag {0:?} (expected one of a, b, c, d, e)")]
    UnknownScenario(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite iterate at iteration {iteration}")]
    NonFiniteIterate {
        iteration: usize,
        trace: Box<FixedPointTrace>,
    },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, NaN) as opposed to bad
    /// input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonRealResult { .. }
                | Error::NonFiniteIterate { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteData(_)
        )
    }
}
