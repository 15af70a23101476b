//! Error types, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch lhs={lhs:?} rhs={rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("softmax over an empty axis")]
    EmptySoftmax,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss of shape [] or [1], got {got:?}")]
    LossNotScalar { got: Vec<usize> },
    #[error("backward called on a tensor that is not tracked on this tape")]
    NotTracked,
    #[error("{op}: operand belongs to a different tape")]
    ForeignTape { op: &'static str },
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("solve span must be positive, got t0={t0} t1={t1}")]
    BadSpan { t0: f64, t1: f64 },
    #[error("initial state contains non-finite values")]
    BadInitialState,
    #[error("output times must be sorted and lie within [t0, t1]")]
    BadOutputTimes,
    #[error("invalid solver config: {0}")]
    BadConfig(String),
    #[error("dynamics too stiff: NFE cap {cap} exceeded (partial nfe {nfe} at t={t})")]
    NfeCapExceeded { cap: usize, nfe: usize, t: f64 },
    #[error("non-finite state encountered at t={t}")]
    NonFiniteState { t: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("distributions differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not a distribution at row {row}: {reason}")]
    NotADistribution { row: usize, reason: String },
    #[error("trajectory has {rows} rows, need at least {min}")]
    TooShort { rows: usize, min: usize },
    #[error("lt index {t} out of range 1..={max}")]
    LtIndex { t: usize, max: usize },
    #[error("relative TLT undefined: overall mean TLT is zero")]
    ZeroOverallTlt,
    #[error("relative TLT needs a question type on every report")]
    MissingQuestionType,
    #[error("no reports given")]
    Empty,
    #[error("confidence interval needs at least 2 values, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hidden size must be even, got {0}")]
    OddHidden(usize),
    #[error("unknown token id {id}, vocabulary size {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("question has {len} tokens, maximum is {max}")]
    TooManyTokens { len: usize, max: usize },
    #[error("question must have at least one token")]
    EmptyQuestion,
    #[error("model expects {expected} reasoning steps, got {got}")]
    StepMismatch { expected: usize, got: usize },
    #[error("gradient list has {got} entries, parameters have {expected}")]
    GradCountMismatch { expected: usize, got: usize },
    #[error("{name}: gradient shape {got:?} does not match parameter shape {expected:?}")]
    GradShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("learning rate history is empty")]
    EmptyHistory,
    #[error("no dynamics involved: the baseline cell cannot be interpolated")]
    NoDynamics,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("malformed program: {0}")]
    MalformedProgram(String),
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("unknown answer '{0}'")]
    UnknownAnswer(String),
    #[error("unknown question type '{0}'")]
    UnknownQuestionType(String),
    #[error("dataset line {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("bad scene: {0}")]
    BadScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset missing or unreadable at {path}: {source}")]
    DatasetMissing {
        path: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("NFE cap exceeded at epoch {epoch}: {source}")]
    NfeCap { epoch: usize, source: SolveError },
    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint parameter '{0}' missing")]
    MissingParam(String),
    #[error("interpolation requested for mac: no dynamics involved")]
    NoDynamics,
    #[error("incomplete run at {0}: missing summary.json")]
    IncompleteRun(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
