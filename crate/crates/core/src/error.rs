use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid compression config: {0}")]
    Compression(String),

    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("decode state is at capacity ({max} positions)")]
    Capacity { max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("position {position} is not after last stored position {last}")]
    NonMonotonicPosition { position: usize, last: usize },

    #[error("position {0} not present")]
    MissingPosition(usize),

    #[error("budget {budget} smaller than protect_recent {protect}")]
    BudgetBelowProtected { budget: usize, protect: usize },

    #[error("invalid task parameters: {0}")]
    Task(String),

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures caused by numerics rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
