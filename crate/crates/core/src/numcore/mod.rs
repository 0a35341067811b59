//! Dense f64 tensors, reverse-mode autodiff and Adam.

mod adam;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use graph::{softmax_axis, AttentionLayout, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("{0}")]
    Empty(String),
    #[error("backward already ran on this graph; reset gradients first")]
    DoubleBackward,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

/// Plain product of two matrices, outside any graph.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let out = kernels::matmul(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis`, outside any graph.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumError> {
    if !x.is_finite() {
        return Err(NumError::NonFinite("softmax input".into()));
    }
    Tensor::new(x.shape().to_vec(), softmax_axis(x.data(), x.shape(), axis)?)
}
