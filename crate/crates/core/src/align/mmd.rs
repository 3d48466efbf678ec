use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::tensor::{sq_dist, Tensor};

/// How the Gaussian kernel width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `gamma = 1 / d`, so `k(x, y) = exp(-|x - y|^2 / d)`.
    #[default]
    InverseDim,
    /// `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
    Fixed(f64),
}

impl BandwidthRule {
    pub fn gamma(self, d: usize) -> f64 {
        match self {
            BandwidthRule::InverseDim => 1.0 / d as f64,
            BandwidthRule::Fixed(sigma) => 1.0 / (2.0 * sigma * sigma),
        }
    }
}

fn kernel(x: &Tensor, y: &Tensor, gamma: f64) -> Result<Tensor, AlignError> {
    Ok(sq_dist(x, y)?.scale(-gamma)?.exp()?)
}

/// Mean of the off-diagonal entries of a square kernel matrix.
fn off_diagonal_mean(k: &Tensor) -> Result<Tensor, AlignError> {
    let n = k.shape()[0];
    let diag: Vec<usize> = (0..n).collect();
    let total = k.sum_all()?.sub(&k.pick(&diag)?.sum_all()?)?;
    Ok(total.scale(1.0 / (n * (n - 1)) as f64)?)
}

fn check(h_m: &Tensor, h_n: &Tensor) -> Result<usize, AlignError> {
    let ok = |h: &Tensor| h.rank() == 2 && h.shape()[0] > 0 && h.shape()[1] > 0;
    if !ok(h_m) || !ok(h_n) || h_m.shape()[1] != h_n.shape()[1] {
        return Err(AlignError::Shape(format!(
            "mmd needs [T, d] inputs of equal width, got {:?} and {:?}",
            h_m.shape(),
            h_n.shape()
        )));
    }
    Ok(h_m.shape()[1])
}

/// Squared MMD between the token sets, biased V-statistic (self-pairs
/// included). Inputs holding the same multiset of rows give exactly zero.
pub fn mmd_loss(h_m: &Tensor, h_n: &Tensor, rule: BandwidthRule) -> Result<Tensor, AlignError> {
    let gamma = rule.gamma(check(h_m, h_n)?);
    // sorted sums: equal multisets of tokens give bitwise equal means
    let xx = kernel(h_m, h_m, gamma)?.mean_all_sorted()?;
    let yy = kernel(h_n, h_n, gamma)?.mean_all_sorted()?;
    let xy = kernel(h_m, h_n, gamma)?.mean_all_sorted()?;
    Ok(xx.add(&yy)?.sub(&xy.scale(2.0)?)?.clamp_min(0.0)?)
}

/// Unbiased U-statistic: self-pairs dropped from the within-set means. Can
/// be negative; needs at least two tokens per set.
pub fn mmd_loss_unbiased(
    h_m: &Tensor,
    h_n: &Tensor,
    rule: BandwidthRule,
) -> Result<Tensor, AlignError> {
    let gamma = rule.gamma(check(h_m, h_n)?);
    if h_m.shape()[0] < 2 || h_n.shape()[0] < 2 {
        return Err(AlignError::Shape(
            "unbiased mmd needs at least two tokens per set".into(),
        ));
    }
    let xx = off_diagonal_mean(&kernel(h_m, h_m, gamma)?)?;
    let yy = off_diagonal_mean(&kernel(h_n, h_n, gamma)?)?;
    let xy = kernel(h_m, h_n, gamma)?.mean_all()?;
    Ok(xx.add(&yy)?.sub(&xy.scale(2.0)?)?)
}
