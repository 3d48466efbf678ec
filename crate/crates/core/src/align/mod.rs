//! Cross-modal alignment losses: entropic OT over cosine costs and
//! Gaussian-kernel MMD, each measured against an anchor modality.

mod cost;
mod mmd;
mod sinkhorn;

pub use cost::{cosine_cost, cost_matrix, CostMatrix};
pub use mmd::{mmd_loss, mmd_loss_unbiased, BandwidthRule};
pub use sinkhorn::{
    epsilon_schedule, sinkhorn_ot, sinkhorn_with, OtSolution, SinkhornOptions, TransportPlan,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("{side} token set has a zero-norm token at row {row}")]
    ZeroNormToken { side: &'static str, row: usize },
    #[error("cost entry ({row}, {col}) is {value}; costs must be finite and nonnegative")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error(
        "sinkhorn did not converge in {iterations} iterations (marginal violation {violation:e})"
    )]
    NotConverged { iterations: usize, violation: f64 },
    #[error("anchor modality {anchor} not present among {count} modalities")]
    MissingAnchor { anchor: usize, count: usize },
    #[error("alignment needs at least two modalities, got {0}")]
    TooFewModalities(usize),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub lambda_ot: f64,
    pub lambda_mmd: f64,
    /// Final Sinkhorn regularization, applied directly to the cosine cost.
    pub blur: f64,
    pub mmd_bandwidth_rule: BandwidthRule,
    /// Index of the anchor modality; `None` means the last one.
    pub anchor: Option<usize>,
    /// Use the U-statistic instead of the V-statistic.
    pub unbiased_mmd: bool,
    /// Solver settings for the loss. By default a solve that reaches the
    /// iteration cap is rounded and used rather than failing training.
    pub sinkhorn: SinkhornOptions,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_ot: 0.001,
            lambda_mmd: 0.01,
            blur: 0.05,
            mmd_bandwidth_rule: BandwidthRule::InverseDim,
            anchor: None,
            unbiased_mmd: false,
            sinkhorn: SinkhornOptions {
                fail_on_cap: false,
                ..SinkhornOptions::default()
            },
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |key: &str, v: f64| Err(AlignError::InvalidConfig(format!("{key} = {v}")));
        if !(self.lambda_ot >= 0.0 && self.lambda_ot.is_finite()) {
            return bad("lambda_ot", self.lambda_ot);
        }
        if !(self.lambda_mmd >= 0.0 && self.lambda_mmd.is_finite()) {
            return bad("lambda_mmd", self.lambda_mmd);
        }
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return bad("blur", self.blur);
        }
        if let BandwidthRule::Fixed(s) = self.mmd_bandwidth_rule {
            if !(s > 0.0 && s.is_finite()) {
                return bad("mmd_bandwidth_rule.fixed", s);
            }
        }
        Ok(())
    }

    pub fn anchor_for(&self, count: usize) -> Result<usize, AlignError> {
        if count < 2 {
            return Err(AlignError::TooFewModalities(count));
        }
        let anchor = self.anchor.unwrap_or(count - 1);
        if anchor >= count {
            return Err(AlignError::MissingAnchor { anchor, count });
        }
        Ok(anchor)
    }

    fn mmd(&self, h_m: &Tensor, h_n: &Tensor) -> Result<Tensor, AlignError> {
        if self.unbiased_mmd {
            mmd_loss_unbiased(h_m, h_n, self.mmd_bandwidth_rule)
        } else {
            mmd_loss(h_m, h_n, self.mmd_bandwidth_rule)
        }
    }

    fn ot(&self, h_m: &Tensor, h_n: &Tensor) -> Result<Tensor, AlignError> {
        ot_loss_with(h_m, h_n, self.blur, &self.sinkhorn)
    }
}

/// Entropic OT distance as a loss. The plan is solved on detached values
/// and then held fixed, so the gradient with respect to the cost is the
/// plan itself.
pub fn ot_loss(h_m: &Tensor, h_n: &Tensor, blur: f64) -> Result<Tensor, AlignError> {
    ot_loss_with(h_m, h_n, blur, &SinkhornOptions::default())
}

pub fn ot_loss_with(
    h_m: &Tensor,
    h_n: &Tensor,
    blur: f64,
    opts: &SinkhornOptions,
) -> Result<Tensor, AlignError> {
    let c = cosine_cost(h_m, h_n)?;
    let values = c.data().iter().map(|v| v.clamp(0.0, 2.0)).collect();
    let fixed = CostMatrix::new(c.shape()[0], c.shape()[1], values)?;
    let sol = sinkhorn_with(&fixed, blur, opts)?;
    let plan = Tensor::from_vec(c.shape().to_vec(), sol.plan.values().to_vec())?;
    Ok(c.mul(&plan)?.sum_all()?)
}

/// Unweighted alignment terms summed over the non-anchor modalities.
#[derive(Debug, Clone)]
pub struct AlignTerms {
    pub ot: Tensor,
    pub mmd: Tensor,
}

/// Both raw terms, regardless of their weights. Used for logging.
pub fn alignment_terms(reps: &[Tensor], cfg: &AlignConfig) -> Result<AlignTerms, AlignError> {
    let anchor = cfg.anchor_for(reps.len())?;
    let mut ot = Tensor::scalar(0.0);
    let mut mmd = Tensor::scalar(0.0);
    for (m, h) in reps.iter().enumerate() {
        if m == anchor {
            continue;
        }
        ot = ot.add(&cfg.ot(h, &reps[anchor])?)?;
        mmd = mmd.add(&cfg.mmd(h, &reps[anchor])?)?;
    }
    Ok(AlignTerms { ot, mmd })
}

/// `sum over m != anchor of lambda_ot * OT(H_m, H_anchor) + lambda_mmd *
/// MMD(H_m, H_anchor)`. Terms with zero weight are not evaluated.
pub fn alignment_loss(reps: &[Tensor], cfg: &AlignConfig) -> Result<Tensor, AlignError> {
    let anchor = cfg.anchor_for(reps.len())?;
    let mut total = Tensor::scalar(0.0);
    for (m, h) in reps.iter().enumerate() {
        if m == anchor {
            continue;
        }
        if cfg.lambda_ot > 0.0 {
            total = total.add(&cfg.ot(h, &reps[anchor])?.scale(cfg.lambda_ot)?)?;
        }
        if cfg.lambda_mmd > 0.0 {
            total = total.add(&cfg.mmd(h, &reps[anchor])?.scale(cfg.lambda_mmd)?)?;
        }
    }
    Ok(total)
}
