use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Failures while reading or writing on-disk containers (datasets, checkpoints).
#[derive(Debug, Error)]
pub enum DataError {
    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },
    #[error("malformed data: {0}")]
    Malformed(String),
}

impl DataError {
    /// Stable numeric code per failure kind, surfaced by the CLI.
    pub fn code(&self) -> u8 {
        match self {
            DataError::VersionMismatch { .. } => 10,
            DataError::Truncated(_) => 11,
            DataError::Checksum { .. } => 12,
            DataError::Malformed(_) => 13,
        }
    }
}
