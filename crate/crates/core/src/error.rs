use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("graph file {0} contains no triples")]
    EmptyGraph(PathBuf),

    #[error("invalid entity id {0}")]
    InvalidEntity(usize),

    #[error("invalid relation id {0}")]
    InvalidRelation(usize),

    #[error("embedding format error: {0}")]
    Format(String),

    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("question {0} has no entity resolvable in the graph")]
    EmptySubgraph(String),

    #[error("no trainable question (needs resolvable source and target entities)")]
    NoTrainableQuestion,

    #[error("non-finite gradient at episode {episode}: {detail}")]
    NonFiniteGradient { episode: usize, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("llm request failed after {attempts} attempt(s): {message}")]
    Llm { attempts: u32, message: String },

    #[error("malformed llm response: {0}")]
    MalformedResponse(String),

    #[error("example {id}: {source}")]
    Example {
        id: String,
        #[source]
        source: Box<Error>,
    },
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
