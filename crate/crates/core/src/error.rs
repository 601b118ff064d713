use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NumericDomain(&'static str),

    #[error("layer norm over {0} feature(s) has singular variance")]
    SingularVariance(usize),

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("token id {id} not in vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("input has no content tokens")]
    EmptyInput,

    #[error("optimizer state does not match parameter `{0}`")]
    StateCorruption(String),

    #[error("cannot build {k} mutually orthogonal vectors in dimension {dim}")]
    InfeasibleOrthogonality { k: usize, dim: usize },

    #[error("virtual model index {k} outside 1..={max}")]
    VirtualModelIndex { k: usize, max: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown label {0:?}")]
    Label(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("prediction members disagree in length: {0} vs {1}")]
    Alignment(usize, usize),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
