//! Error type shared by every engine module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmoError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("cannot build {rows} orthonormal rows in dimension {cols}")]
    TooManyRows { rows: usize, cols: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gate value {0} outside [0, 1]")]
    InvalidGate(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("k = {k} exceeds bank size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("blend combination degenerates to the zero vector")]
    DegenerateBlend,
    #[error("attention row (b={batch}, h={head}, q={query}) has non-positive sum after reweighting")]
    NonPositiveRow {
        batch: usize,
        head: usize,
        query: usize,
    },
    #[error("oracle failure on {context}: {message}")]
    OracleError { context: String, message: String },
    #[error("both annotators use a single identical category but disagree")]
    DegenerateMarginals,
    #[error("at least 2 subjects and 2 treatments required, got {subjects}x{treatments}")]
    TooFewSubjects { subjects: usize, treatments: usize },
    #[error("format error at byte {offset}: {message}")]
    FormatError { offset: u64, message: String },
    #[error("format error at row {row}, column {column}: {message}")]
    CsvFormat {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionError { found: u32, expected: u32 },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmoError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(EmoError::DimMismatch { expected, got })
    }
}
