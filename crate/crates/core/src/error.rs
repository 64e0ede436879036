use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"MSC1\"")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("zero dimension in cube shape {height}x{width}x{bands}")]
    ZeroDimension {
        height: usize,
        width: usize,
        bands: usize,
    },

    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("sample count {actual} does not match shape (expected {expected})")]
    SampleCount { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported pixel format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("covariance is not positive semidefinite (smallest eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error(
        "band {band} has zero noise variance; raise it with a diagonal floor \
         (e.g. --diag-floor) before preselection"
    )]
    ZeroVarianceBand { band: usize },

    #[error("metric matrix is singular even after regularization")]
    SingularMetric,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite risk: {0}")]
    NonFiniteRisk(String),

    #[error("malformed csv: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
