use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("stage {stage} requires {missing}")]
    StageOrder { stage: u8, missing: String },
    #[error("nothing to aggregate: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
