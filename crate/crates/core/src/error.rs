use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} out of vocabulary range (size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corruption not applicable: {0}")]
    InapplicableCorruption(String),

    #[error("no stored tuple for register {register} before tuple {tuple}")]
    NoStoredTuple { register: usize, tuple: usize },

    #[error("component out of range: {0}")]
    ComponentOutOfRange(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
