use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown parameter id {0}")]
    UnknownParam(u64),

    #[error("invalid block spec: {0}")]
    InvalidBlock(String),

    #[error("cannot attach {requested} branches to a teacher with {blocks} blocks")]
    TooManyBranches { requested: usize, blocks: usize },

    #[error("gates of supernet layer {0} are not set")]
    GatesUnset(usize),

    #[error("gate state of layer {layer} is stale (sampled at {sampled:?}, update at {iteration})")]
    StaleGates {
        layer: usize,
        sampled: Option<u64>,
        iteration: u64,
    },

    #[error("architecture index {index} out of range at layer {layer} ({choices} candidates)")]
    InvalidArchitecture {
        layer: usize,
        index: usize,
        choices: usize,
    },

    #[error("loss requires at least one branch")]
    EmptyBranches,

    #[error("DKD needs at least two classes")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyData(&'static str),

    #[error("operation requires {expected} mode, model is in {actual} mode")]
    WrongMode {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("teacher emits {teacher} classes but data has {data}")]
    ClassMismatch { teacher: usize, data: usize },

    #[error("search budget of {budget} layers is invalid for a supernet of depth {depth}")]
    InvalidBudget { budget: usize, depth: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
