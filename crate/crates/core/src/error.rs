use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),

    #[error("no output named `{0}`")]
    UnknownOutput(String),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("label {label} at point {index} is out of range")]
    LabelOutOfRange { index: usize, label: i64 },

    #[error("cluster has no members")]
    EmptyCluster,

    #[error("mask has no foreground points")]
    EmptyMask,

    #[error("ground truth has no instances")]
    EmptyGroundTruth,

    #[error("could not place instances after {attempts} attempts")]
    Packing { attempts: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
