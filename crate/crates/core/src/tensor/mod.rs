//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit: noise calibration and the privacy accountant are
//! precision-sensitive, and desk scale makes the cost acceptable. A
//! [`Graph`] records one forward pass as a tape and replays it in reverse;
//! per-example gradients are obtained by running one graph per record over
//! a shared read-only [`ParamStore`] snapshot.

mod batch;
mod graph;
mod store;

pub use batch::{batch_mean_gradient, per_example_gradients, LossBuilder};
pub use graph::{Graph, NodeId};
pub use store::ParamStore;

use thiserror::Error;

/// Errors from tensor construction, graph ops, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("backward target is not a scalar (shape {0:?})")]
    LossNotScalar(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// A dense row-major tensor of f64 values. Rank 1 or 2 in practice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from explicit shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// A rows×cols matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) view: rank-1 tensors count as a single row.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rank-{} tensor where rank 1 or 2 expected", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// ℓ2 norm of a flat slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
