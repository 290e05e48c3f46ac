//! Dense tensors, a small reverse-mode autodiff graph and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{bce_term, log_sigmoid, sigmoid, Bindings, Graph, NodeId, TensorMap, LOG_CLAMP};
pub use tensor::Tensor;

pub(crate) use graph::unit_rows;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: String,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: String, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: String,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("adam: no parameter named `{0}`")]
    UnknownParam(String),
}

impl NumericsError {
    pub fn shape(op: &str, a: &[usize], b: &[usize]) -> Self {
        Self::ShapeMismatch {
            op: op.to_string(),
            shapes: vec![a.to_vec(), b.to_vec()],
        }
    }
}
