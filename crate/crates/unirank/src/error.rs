use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("slate is missing {0}")]
    IncompleteSlate(&'static str),
    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: usize, components: String },
    #[error("dimension mismatch: {what} is {left} in {left_src} but {right} in {right_src}")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        left_src: &'static str,
        right: usize,
        right_src: &'static str,
    },
    #[error("world mismatch: {0}")]
    WorldMismatch(String),
    #[error("degenerate quadratic: {0}")]
    Degenerate(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
