//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional handle into a
//! [`Tape`]. Operations on tensors that are recorded on a tape register a
//! backward rule; operations on untracked tensors are plain evaluations and
//! build nothing.
//!
//! ```
//! use alignmamba::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let a = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = a.mul(&a).unwrap().sum_all().unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&a).unwrap(), vec![2.0, 4.0, 6.0]);
//! ```
//!
//! # Broadcasting
//!
//! Binary elementwise operations accept operands of identical shape, an
//! operand with exactly one element (scalar broadcast, any rank), or two
//! operands of the *same rank* whose dimensions are pairwise equal or 1.
//! There is no implicit rank promotion: a bias for a `[T, d]` activation is
//! stored as `[1, d]`, a per-row weight as `[T, 1]`.
//!
//! # Precision
//!
//! Values are computed in `f64`. The [`DType`] tag records storage
//! precision: an operation whose inputs are all `F32` rounds its output to
//! the nearest `f32`, so `F32` tensors always hold exactly representable
//! values and serialize losslessly.

mod linalg;
mod nn;
mod ops;
mod tape;

pub use linalg::{gemm, Scalar};
pub use nn::{causal_conv1d, routed_linear, selective_scan, sq_dist};
pub use tape::{Gradients, Tape};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use tape::NodeRef;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value {value} at flat index {index} of output {shape:?}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
        shape: Vec<usize>,
    },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape was already consumed by backward()")]
    TapeConsumed,
    #[error("operands are recorded on different tapes")]
    TapeMismatch,
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Invalid {
        op,
        msg: msg.into(),
    })
}

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            dtype: DType::F64,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Wraps shared storage without copying.
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            dtype: DType::F64,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: Arc::new(vec![value; numel(shape)]),
            node: None,
        }
    }

    /// A rank-0 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            );
        }
        Ok(self.data[0])
    }

    /// Element `[row, col]` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Same values re-tagged with `dtype`; converting to `F32` rounds.
    pub fn with_dtype(&self, dtype: DType) -> Tensor {
        let data = match dtype {
            DType::F64 => Arc::clone(&self.data),
            DType::F32 if self.dtype == DType::F32 => Arc::clone(&self.data),
            DType::F32 => Arc::new(self.data.iter().map(|&v| v as f32 as f64).collect()),
        };
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// An untracked copy sharing storage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Shorthand for `tape.backward(self)` on the tape this tensor lives on.
    pub fn backward(&self) -> Result<Gradients> {
        match &self.node {
            Some(n) => n.tape.backward(self),
            None => invalid("backward", "loss is not recorded on any tape"),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let head: Vec<f64> = self.data.iter().take(SHOWN).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("tracked", &self.is_tracked())
            .field(
                "data",
                &format_args!("{head:?}{}", if self.numel() > SHOWN { " .." } else { "" }),
            )
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality: same shape, dtype and bit-identical data.
    fn eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
