//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, training, and the experiment driver.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes disagree; the message names the offending layer and
    /// level where known.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// A batch or dataset violates the data contract (e.g. unseen class label).
    #[error("data error: {0}")]
    Data(String),

    /// An operation was invoked in a state that cannot satisfy it.
    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The incremental-learning protocol was violated (class overlap, empty phase).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A file does not conform to its binary layout.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Training diverged or otherwise failed; carries diagnostics.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
