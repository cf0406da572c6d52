//! Dense tensors, reverse-mode differentiation, and the AdamW optimizer.

mod archive;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod param;
mod tensor;

pub use archive::{read_archive, write_archive, ArchiveEntry};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};


/// Failures raised by tensor operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("input is not a probability distribution (sum {sum})")]
    NotDistribution { sum: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_slice<T: Scalar>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}
