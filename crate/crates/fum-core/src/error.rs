//! Crate-wide error type.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {what}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        what: String,
    },
    #[error("softmax over a fully masked input")]
    AllMasked,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("{path}: {what} at byte {offset}")]
    BinaryFormat {
        path: String,
        offset: u64,
        what: String,
    },
    #[error("cache lookup: unknown id `{0}`")]
    CacheMiss(String),
    #[error("{path}:{line}: {what}")]
    DataFormat {
        path: String,
        line: usize,
        what: String,
    },
    #[error("unknown news id `{id}` referenced by {context}")]
    UnknownNewsId { id: String, context: String },
    #[error("config: unknown key `{0}`")]
    UnknownConfigKey(String),
    #[error("config: invalid value `{value}` for key `{key}`: {what}")]
    InvalidConfigValue {
        key: String,
        value: String,
        what: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("genre index {index} out of range (k = {k})")]
    GenreIndex { index: usize, k: usize },
    #[error("article `{0}`: every genre is empty")]
    EmptyArticle(String),
    #[error("history length {len} exceeds m = {m}; truncate during ingestion")]
    HistoryTooLong { len: usize, m: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("news `{id}`: {source}")]
    NewsEncode { id: String, source: Box<Error> },
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
