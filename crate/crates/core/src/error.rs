use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("non-finite value {value} at ({row}, {col}) in {context}")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("exp overflow: input {value} exceeds {limit}")]
    Overflow { value: f64, limit: f64 },

    #[error("degenerate row {row}: normalizer {normalizer} is not positive")]
    DegenerateRow { row: usize, normalizer: f64 },

    #[error("row {row} is not a probability distribution: {reason}")]
    NotDistribution { row: usize, reason: String },

    #[error("row {row} has zero norm")]
    ZeroVector { row: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadratic form needs {required} bytes for the score matrix, cap is {cap} bytes")]
    MemoryCap { required: u128, cap: u128 },

    #[error("score matrix not available")]
    MissingScores,
}
