//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the universal value carrier: a flat `f64` buffer in
//! row-major order plus its shape. Every stored entry is finite; the
//! constructors reject NaN and infinity so downstream numeric code never has
//! to re-check.
//!
//! [`Tape`] records a forward computation (linear maps, convolutions,
//! coordinate-wise nonlinearities, additions, reductions) as an explicitly
//! topologically ordered graph. [`eval_forward`] evaluates it,
//! [`eval_backward`] returns exact gradients of a scalar node with respect to
//! every leaf, parameters and inputs alike.

mod conv;
mod serial;
mod tape;

pub use conv::{conv2d, conv2d_backward};
pub use serial::{read_tensor, write_tensor};
pub use tape::{
    eval_backward, eval_backward_seeded, eval_forward, Activation, LeafKind, NodeId, Padding,
    Tape, TapeValues,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch at node {node}: {message}")]
    ShapeMismatch { node: usize, message: String },
    #[error("non-finite intermediate at node {node}")]
    NonFiniteNode { node: usize },
    #[error("leaf {node} is not bound")]
    UnboundLeaf { node: usize },
    #[error("backward seed node {node} is not scalar (len {len})")]
    NonScalarSeed { node: usize, len: usize },
    #[error("invalid op: {0}")]
    InvalidOp(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt tensor data: {0}")]
    Corrupt(String),
}

/// Dense multi-dimensional array of finite reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length agreement and that every
    /// entry is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(vec![], vec![value])
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A tensor is scalar when it holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise `self + c * other`; shapes must match.
    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                node: usize::MAX,
                message: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + c * b)
            .collect();
        Tensor::new(self.shape.clone(), values)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|v| v * c).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Reinterprets the buffer under a new shape of the same total length.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.values.clone())
    }
}
