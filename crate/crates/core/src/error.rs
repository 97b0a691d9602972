use alloc::string::String;

/// Errors raised by the kernels and verification routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid buffer: expected {expected} entries, got {actual}")]
    BufferLength { expected: usize, actual: usize },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("SVD did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token grid {height}x{width} does not cover {tokens} tokens")]
    Grid { height: usize, width: usize, tokens: usize },

    #[error("kernel has {kernel} channels but the value matrix has {values}")]
    ChannelMismatch { kernel: usize, values: usize },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("row {row} is not normalized (sum {sum})")]
    Normalization { row: usize, sum: f64 },

    #[error("insufficient points: {0}")]
    InsufficientPoints(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
