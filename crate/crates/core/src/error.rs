//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes incompatible for a tensor operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Vocabulary inconsistency (id out of range, token mismatch).
    #[error("vocab error: {0}")]
    Vocab(String),

    /// CTC alignment impossible for the given lengths.
    #[error("infeasible ctc alignment: {0}")]
    InfeasibleCtc(String),

    /// Malformed file contents (checkpoints, feature containers, tables).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid input data (empty corpus, bad transition rows, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
