use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("{0}")]
    InvalidValue(String),

    #[error("cannot tokenize `{smiles}`: unexpected character {ch:?} at offset {offset}")]
    Tokenize {
        smiles: String,
        offset: usize,
        ch: char,
    },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("embedding file: {0}")]
    Embedding(String),

    #[error("no embedding for SMILES `{0}`")]
    MissingEmbedding(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
