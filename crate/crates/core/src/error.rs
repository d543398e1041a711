use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid examples in {path} ({skipped} malformed lines skipped)")]
    NoExamples { path: PathBuf, skipped: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid example {id}: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("no supervised tokens")]
    NoSupervisedTokens,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward output carries no activation cache")]
    MissingCache,
    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite parameter in tensor `{tensor}`")]
    NonFiniteParameter { tensor: String },
    #[error("non-finite loss at step {step} on example `{example}`")]
    NonFiniteLoss { step: u64, example: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsatisfiable corpus spec: {0}")]
    CorpusSpec(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
