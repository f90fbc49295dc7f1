use std::path::PathBuf;

use crate::spectral::SvdTriple;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    Dimension {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("entry ({row}, {col}) lies outside a {rows}x{cols} matrix")]
    IndexOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("duplicate observation at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is zero, ratio undefined")]
    ZeroDenominator(&'static str),

    #[error(
        "truncated SVD did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    SvdNotConverged {
        iterations: usize,
        residual: f64,
        best: Box<SvdTriple>,
    },

    #[error("no mode lies above the detection threshold; observations carry no usable signal")]
    BelowThreshold,

    #[error("every candidate lambda failed: {0}")]
    AllCandidatesFailed(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
