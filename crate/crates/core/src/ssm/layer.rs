use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SsmError;
use crate::params::{uniform, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{causal_conv1d, selective_scan, Tensor};

/// Sizes and initialization ranges shared by vanilla and modality-aware
/// layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    /// State size per channel.
    pub d_state: usize,
    /// Causal convolution width.
    pub d_conv: usize,
    /// `d_inner = expand * d_model`.
    pub expand: usize,
    /// Rank of the step-size projection; `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dt_rank: None,
            dt_min: 0.001,
            dt_max: 0.1,
        }
    }
}

impl MambaConfig {
    pub fn d_inner(&self, d_model: usize) -> usize {
        self.expand * d_model
    }

    pub fn dt_rank(&self, d_model: usize) -> usize {
        self.dt_rank.unwrap_or(d_model.div_ceil(16)).max(1)
    }
}

/// Input-dependent diagonal SSM: projects each token to a step size and the
/// `B`, `C` readin/readout vectors, then scans.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCore {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    /// `[d_inner, d_state]`; the continuous state matrix is `-exp(a_log)`.
    pub a_log: ParamId,
    /// `d_inner -> dt_rank + 2 * d_state`, no bias.
    pub x_proj: Linear,
    /// `dt_rank -> d_inner`; softplus of its output is the step size.
    pub dt_proj: Linear,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmCore {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_inner: usize,
        dt_rank: usize,
        cfg: &MambaConfig,
    ) -> SsmCore {
        let n = cfg.d_state;
        // S4D-real: A[d, n] = -(n + 1)
        let a_log = (0..d_inner)
            .flat_map(|_| (1..=n).map(|k| (k as f64).ln()))
            .collect();
        let a_log = store.add(format!("{name}.a_log"), &[d_inner, n], a_log);
        let x_proj = Linear::new(
            store,
            rng,
            &format!("{name}.x_proj"),
            d_inner,
            dt_rank + 2 * n,
            false,
            1.0,
        );
        let dt_weight = store.add(
            format!("{name}.dt_proj.weight"),
            &[dt_rank, d_inner],
            uniform(rng, dt_rank * d_inner, (dt_rank as f64).powf(-0.5)),
        );
        // bias such that softplus(bias) is log-uniform in [dt_min, dt_max]
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias = (0..d_inner)
            .map(|_| inverse_softplus(rng.gen_range(lo..=hi).exp()))
            .collect();
        let dt_bias = store.add(format!("{name}.dt_proj.bias"), &[1, d_inner], dt_bias);
        SsmCore {
            d_inner,
            d_state: n,
            dt_rank,
            a_log,
            x_proj,
            dt_proj: Linear {
                weight: dt_weight,
                bias: Some(dt_bias),
                in_dim: dt_rank,
                out_dim: d_inner,
            },
        }
    }

    /// Step sizes `[T, d_inner]`, state matrix `[d_inner, N]`, and `B`, `C`
    /// (`[T, N]` each) for the input sequence `u`.
    pub fn parameters_for(
        &self,
        p: &Bound,
        u: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor), SsmError> {
        let (r, n) = (self.dt_rank, self.d_state);
        let proj = self.x_proj.forward(p, u)?;
        let dt_in = proj.cols(0..r)?;
        let b = proj.cols(r..r + n)?;
        let c = proj.cols(r + n..r + 2 * n)?;
        let delta = self.dt_proj.forward(p, &dt_in)?.softplus()?;
        let a = p[self.a_log].exp()?.neg()?;
        Ok((delta, a, b, c))
    }

    pub fn forward(&self, p: &Bound, u: &Tensor) -> Result<Tensor, SsmError> {
        let (delta, a, b, c) = self.parameters_for(p, u)?;
        Ok(selective_scan(u, &delta, &a, &b, &c)?)
    }
}

/// Everything between the input and output projections of a Mamba layer:
/// causal depthwise convolution and SiLU on the value path, the selective
/// SSM, and the SiLU gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaCore {
    pub d_inner: usize,
    pub d_conv: usize,
    /// `[d_conv, d_inner]`
    pub conv_weight: ParamId,
    /// `[1, d_inner]`
    pub conv_bias: ParamId,
    pub ssm: SsmCore,
}

impl MambaCore {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        cfg: &MambaConfig,
    ) -> MambaCore {
        let d_inner = cfg.d_inner(d_model);
        let k = cfg.d_conv;
        let bound = 1.0 / (k as f64).sqrt();
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            &[k, d_inner],
            uniform(rng, k * d_inner, bound),
        );
        let conv_bias = store.add(
            format!("{name}.conv.bias"),
            &[1, d_inner],
            uniform(rng, d_inner, bound),
        );
        let ssm = SsmCore::new(
            store,
            rng,
            &format!("{name}.ssm"),
            d_inner,
            cfg.dt_rank(d_model),
            cfg,
        );
        MambaCore {
            d_inner,
            d_conv: k,
            conv_weight,
            conv_bias,
            ssm,
        }
    }

    /// Maps the in-projected sequence `[T, 2 * d_inner]` (value half, then
    /// gate half) to the gated SSM output `[T, d_inner]`.
    pub fn forward(&self, p: &Bound, projected: &Tensor) -> Result<Tensor, SsmError> {
        let d = self.d_inner;
        if projected.rank() != 2 || projected.shape()[1] != 2 * d {
            return Err(SsmError::Shape {
                what: "in-projected sequence",
                expected: vec![projected.shape().first().copied().unwrap_or(0), 2 * d],
                got: projected.shape().to_vec(),
            });
        }
        let value = projected.cols(0..d)?;
        let gate = projected.cols(d..2 * d)?;
        let value = causal_conv1d(&value, &p[self.conv_weight], &p[self.conv_bias])?.silu()?;
        let y = self.ssm.forward(p, &value)?;
        Ok(y.mul(&gate.silu()?)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.conv_weight,
            self.conv_bias,
            self.ssm.a_log,
            self.ssm.x_proj.weight,
            self.ssm.dt_proj.weight,
        ];
        ids.extend(self.ssm.dt_proj.bias);
        ids
    }
}

/// Vanilla Mamba layer with a residual connection:
/// `x + out_proj(core(in_proj(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaLayer {
    pub d_model: usize,
    pub in_proj: Linear,
    pub core: MambaCore,
    pub out_proj: Linear,
}

impl MambaLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        cfg: &MambaConfig,
    ) -> MambaLayer {
        let d_inner = cfg.d_inner(d_model);
        let in_proj = Linear::new(
            store,
            rng,
            &format!("{name}.in_proj"),
            d_model,
            2 * d_inner,
            true,
            1.0,
        );
        let core = MambaCore::new(store, rng, name, d_model, cfg);
        let out_proj = Linear::new(
            store,
            rng,
            &format!("{name}.out_proj"),
            d_inner,
            d_model,
            true,
            1.0,
        );
        MambaLayer {
            d_model,
            in_proj,
            core,
            out_proj,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor, SsmError> {
        check_input(x, self.d_model)?;
        let projected = self.in_proj.forward(p, x)?;
        let y = self.core.forward(p, &projected)?;
        Ok(self.out_proj.forward(p, &y)?.add(x)?)
    }
}

pub(crate) fn check_input(x: &Tensor, d_model: usize) -> Result<(), SsmError> {
    if x.rank() != 2 || x.shape()[1] != d_model || x.shape()[0] == 0 {
        return Err(SsmError::Shape {
            what: "layer input",
            expected: vec![x.shape().first().copied().unwrap_or(1).max(1), d_model],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}
