use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("EmptyLogits: softmax over an empty vector")]
    EmptyLogits,
    #[error("TokenOutOfVocab: id {id} with vocabulary size {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },
    #[error("NonScalarLoss: backward called on a tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("InvalidEpsilon: {0}")]
    InvalidEpsilon(f64),
    #[error("NonDeterministicFunction: repeated evaluations returned {first} and {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("ParseError at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("EmptyCorpus")]
    EmptyCorpus,
    #[error("EmptyResponse")]
    EmptyResponse,
    #[error("Diverged at step {0}")]
    Diverged(usize),
    #[error("DegenerateTrainingSet: {0}")]
    DegenerateTrainingSet(String),
    #[error("NoSuccessorAvailable")]
    NoSuccessorAvailable,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint has {expected}, current vocabulary is {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parameter name spaces overlap: {0}")]
    SharedParameters(String),
    #[error("validation failed for {path}: {msg}")]
    Validation { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
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
