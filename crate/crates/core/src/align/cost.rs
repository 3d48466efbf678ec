use super::AlignError;
use crate::tensor::Tensor;

/// Pairwise cosine distances between two token sets, `[T_m, T_n]`, every
/// entry in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Wraps raw costs. Entries must be finite and nonnegative.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<CostMatrix, AlignError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(AlignError::Shape(format!(
                "{} values for a {rows}x{cols} cost matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(AlignError::InvalidCost {
                row: i / cols,
                col: i % cols,
                value: values[i],
            });
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn check_tokens(side: &'static str, h: &Tensor) -> Result<(), AlignError> {
    if h.rank() != 2 || h.shape()[0] == 0 || h.shape()[1] == 0 {
        return Err(AlignError::Shape(format!(
            "{side} tokens must be a nonempty [T, d] matrix, got {:?}",
            h.shape()
        )));
    }
    let d = h.shape()[1];
    for (row, tok) in h.data().chunks(d).enumerate() {
        if tok.iter().all(|&v| v == 0.0) {
            return Err(AlignError::ZeroNormToken { side, row });
        }
    }
    Ok(())
}

/// Differentiable cosine cost `C_ij = 1 - cos(h_m[i], h_n[j])`.
pub fn cosine_cost(h_m: &Tensor, h_n: &Tensor) -> Result<Tensor, AlignError> {
    check_tokens("first", h_m)?;
    check_tokens("second", h_n)?;
    if h_m.shape()[1] != h_n.shape()[1] {
        return Err(AlignError::Shape(format!(
            "token widths differ: {:?} vs {:?}",
            h_m.shape(),
            h_n.shape()
        )));
    }
    let normalize = |h: &Tensor| -> Result<Tensor, AlignError> {
        let norms = h.square()?.sum(&[1])?.sqrt()?;
        Ok(h.div(&norms)?)
    };
    let sim = normalize(h_m)?.matmul(&normalize(h_n)?.transpose()?)?;
    Ok(sim.neg()?.add_scalar(1.0)?)
}

/// Cosine cost values between two token sets. Zero-norm tokens are rejected
/// since their angle is undefined.
pub fn cost_matrix(h_m: &Tensor, h_n: &Tensor) -> Result<CostMatrix, AlignError> {
    let c = cosine_cost(&h_m.detach(), &h_n.detach())?;
    let values = c.data().iter().map(|v| v.clamp(0.0, 2.0)).collect();
    CostMatrix::new(c.shape()[0], c.shape()[1], values)
}
