//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("empty sequence")]
    EmptySequence,

    #[error("empty loss support: every target position is padding")]
    EmptyLossSupport,

    #[error("attention row {row} has no attendable position")]
    FullyMaskedRow { row: usize },

    #[error("sequence length {len} exceeds configured maximum of {max} positions")]
    Overlength { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus files disagree: {0}")]
    CorpusMismatch(String),

    #[error("chunk (doc {doc_id}, window {window_start}) has {len} tokens, above the batch budget of {max_tokens}")]
    ChunkTooLong {
        doc_id: usize,
        window_start: usize,
        len: usize,
        max_tokens: usize,
    },

    #[error("learning-rate schedule is undefined at step 0")]
    ZeroStep,

    #[error("non-finite gradient in tensor {name}")]
    NonFiniteGrad { name: String },

    #[error("training diverged at step {step}: loss is not finite (post-mortem checkpoint written)")]
    Diverged { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("decoding: {0}")]
    Decode(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
