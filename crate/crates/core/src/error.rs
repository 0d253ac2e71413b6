//! Crate-wide error type.

use thiserror::Error;

/// All fallible operations in this crate return [`Result`].
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An attention row has no visible entries. The layout compiler
    /// guarantees self-visibility, so this indicates a broken caller.
    #[error("softmax_masked: row {row} has no visible entries")]
    EmptyVisibleRow { row: usize },

    /// A non-finite value was produced where finiteness is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid sequence layout.
    #[error("layout error: {0}")]
    Layout(String),

    /// A caller violated an internal contract (cache/position mismatch,
    /// mask size disagreement, disabled feature invoked, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Textual input (layout strings, XYZ files, CSV) failed to parse.
    /// `pos` is a byte offset for single-line inputs and a 1-based line
    /// number for line-oriented files.
    #[error("parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
