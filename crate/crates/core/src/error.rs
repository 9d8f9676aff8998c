use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("malformed input at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("interaction file contains no interactions")]
    EmptyCorpus,
    #[error("corpus is empty after {k}-core filtering")]
    EmptyAfterFilter { k: usize },
    #[error("embedding file is missing {count} corpus item(s), e.g. {examples:?}")]
    MissingEmbeddings { count: usize, examples: Vec<String> },
    #[error("embedding format error: {0}")]
    EmbeddingFormat(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("k-means needs at least {needed} samples, got {got}; use a larger batch")]
    TooFewSamples { needed: usize, got: usize },
    #[error("collision group of {size} items with identical tokens exceeds the suffix capacity {capacity}")]
    SuffixCapacity { size: usize, capacity: usize },
    #[error("duplicate identifier {0:?}")]
    DuplicateIdentifier(Vec<usize>),
    #[error("identifier maps cover different item sets")]
    ItemSetMismatch,
    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("identifier map was derived from tokenizer {map_hash} but the checkpoint is {tokenizer_hash}")]
    StaleIdentifiers { map_hash: String, tokenizer_hash: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
