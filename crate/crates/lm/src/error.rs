use thiserror::Error;
use trajforge_core::CodecError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence{} has {len} tokens but the model context is {max}", id.as_ref().map(|i| format!(" {i:?}")).unwrap_or_default())]
    SequenceTooLong { id: Option<String>, len: usize, max: usize },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence needs at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training mode `lora-only` needs an adapter")]
    MissingAdapter,
    #[error("encoding trajectory {id:?}: {source}")]
    Encode {
        id: String,
        #[source]
        source: CodecError,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint vocabulary hash does not match its grid/time spec")]
    VocabularyMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LmError> = std::result::Result<T, E>;
