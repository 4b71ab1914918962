use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading, generating, or splitting a corpus.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing corpus file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("unknown {kind} id {id} referenced in {file}:{line}")]
    UnknownId {
        kind: &'static str,
        id: u64,
        file: String,
        line: usize,
    },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("cannot split {users} users; at least 10 are required")]
    TooFewUsers { users: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from the loss and optimization kernel.
#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("objective became non-finite at epoch {epoch}; lower the learning rate")]
    Diverged { epoch: usize },
    #[error("negative set contains the target item {item}")]
    TargetInNegatives { item: u32 },
    #[error("item {item} is outside the embedding table ({rows} rows)")]
    UnknownItem { item: u32, rows: usize },
}

/// Errors from model persistence.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model format version mismatch (found {found})")]
    VersionMismatch { found: String },
    #[error("model file is truncated")]
    Truncated,
    #[error("model checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt model section: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from configuration parsing and validation.
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Protocol violations in a conversation session.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("session is no longer active")]
    NotActive,
    #[error("no question is pending")]
    NoPendingQuestion,
    #[error("no recommendation is pending")]
    NoPendingRecommendation,
    #[error("all trees have been visited")]
    AllTreesVisited,
}

/// Top-level error for training and evaluation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
