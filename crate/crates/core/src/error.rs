use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MagnError>;

#[derive(Debug, Error)]
pub enum MagnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error(
        "patch geometry does not tile a {extent}-pixel {axis} with window {window}, stride {stride}, \
         padding {padding}; {suggestion}"
    )]
    Geometry {
        axis: &'static str,
        extent: usize,
        window: usize,
        stride: usize,
        padding: usize,
        suggestion: String,
    },

    #[error("pixel graph of {nodes} nodes exceeds the node budget of {budget}; restore with tiling")]
    NodeBudget { nodes: usize, budget: usize },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MagnError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MagnError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        MagnError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
