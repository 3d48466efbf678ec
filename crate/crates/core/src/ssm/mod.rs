//! Selective state-space scan and the vanilla Mamba layer.

pub mod infer;
mod layer;
mod scan;

pub(crate) use layer::check_input;
pub use layer::{MambaConfig, MambaCore, MambaLayer, SsmCore};
pub use scan::{
    combine, discretize, scan_parallel, scan_sequential, scan_states, Affine, Discretized,
};

use thiserror::Error;

use crate::params::Bound;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("step size must be positive, got {value} at token {token}, channel {channel}")]
    NonPositiveStep {
        token: usize,
        channel: usize,
        value: f64,
    },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Applies a vanilla Mamba layer to `x: [T, d_model]`.
pub fn mamba_forward(layer: &MambaLayer, params: &Bound, x: &Tensor) -> Result<Tensor, SsmError> {
    layer.forward(params, x)
}
