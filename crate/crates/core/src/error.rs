use thiserror::Error;

pub type Result<T, E = PmnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PmnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any differentiable input")]
    DetachedLoss,

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value at coordinate {coord} of `{name}`")]
    NonFinite { name: String, coord: usize },

    #[error("duplicate name `{0}`")]
    Duplicate(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error(
        "module `{parent}` (level {parent_level}) cannot call `{child}` (level {child_level})"
    )]
    LevelViolation {
        parent: String,
        parent_level: u32,
        child: String,
        child_level: u32,
    },

    #[error("module `{parent}` references unregistered child `{child}`")]
    DanglingChild { parent: String, child: String },

    #[error("terminal module `{0}` cannot take children")]
    TerminalWithChildren(String),

    #[error("invalid module spec `{module}`: {msg}")]
    InvalidSpec { module: String, msg: String },

    #[error("unknown module `{0}`")]
    UnknownModule(String),

    #[error("module `{module}`, component {component}, step {step}: {source}")]
    Component {
        module: String,
        component: String,
        step: usize,
        #[source]
        source: Box<PmnError>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("gating group `{0}` is empty")]
    EmptyGroup(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed question: {0}")]
    MalformedQuestion(String),

    #[error("child module `{0}` has not been trained or loaded")]
    UntrainedChild(String),

    #[error("non-finite loss at step {0}")]
    NanLoss(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PmnError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        PmnError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        PmnError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
