use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid shape {0:?}: rank must be 1..=5 with positive extents")]
    InvalidShape(Vec<usize>),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("empty axis set")]
    EmptyAxes,

    #[error("kernel extents must be odd, got {0:?}")]
    EvenKernel(Vec<usize>),

    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },

    #[error("allocation {0} already retained")]
    DoubleRetain(u64),

    #[error("allocation {0} was never retained")]
    UnknownAllocation(u64),

    #[error("tape {0} has been disposed")]
    TapeDisposed(u64),

    #[error("node {0} is not on this tape")]
    NodeNotOnTape(usize),

    #[error("type mismatch: {0}")]
    TypeMismatch(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible sampling request: {0}")]
    Infeasible(String),

    #[error(
        "fixed-point inversion did not converge at unroll {unroll}: residual {residual:.3e} after {iterations} iterations"
    )]
    FixedPointDiverged {
        unroll: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("invalid MELT data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
