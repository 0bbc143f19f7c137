use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    Empty,
    #[error("no finite logit")]
    NoFiniteLogit,
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("degenerate GCC: weighted sum of class features has zero norm")]
    DegenerateGcc,
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("vector not L2-normalized (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("ratio too small for batch size: floor({ratio} * {identities} / {batch}) = 0")]
    RatioTooSmall {
        ratio: f64,
        identities: usize,
        batch: usize,
    },
    #[error("positive slot {0} is listed among the conflict slots")]
    PositiveMasked(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),
    #[error("stale tape: recorded at generation {tape}, parameters at generation {params}")]
    StaleTape { tape: u64, params: u64 },
    #[error("empty suite")]
    EmptySuite,
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported container: {0}")]
    Container(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures that map to the "numerical failure" exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Tolerance(_) | Error::NoFiniteLogit | Error::PositiveMasked(_)
        )
    }
}
