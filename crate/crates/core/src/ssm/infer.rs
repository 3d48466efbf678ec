//! Forward-only Mamba kernels over plain buffers, generic over `f32`/`f64`.
//!
//! No tape and no stored states: memory is linear in sequence length, which
//! is what the efficiency benchmarks measure. Large buffers go through
//! [`crate::mem::try_zeroed`] so a thread budget turns into an
//! [`OutOfMemory`] error rather than an abort.

use crate::mem::{try_zeroed, OutOfMemory};
use crate::params::{Linear, ParamStore};
use crate::tensor::Scalar;

use super::layer::{MambaCore, MambaLayer};

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// `y = x W + b` with `W: [in, out]` row-major.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn from_linear(lin: &Linear, store: &ParamStore) -> Dense<T> {
        Dense {
            in_dim: lin.in_dim,
            out_dim: lin.out_dim,
            weight: cast(store.value(lin.weight)),
            bias: match lin.bias {
                Some(b) => cast(store.value(b)),
                None => vec![T::zero(); lin.out_dim],
            },
        }
    }

    /// Applies the map to `rows` rows of `x`, writing into `out`.
    pub fn apply_into(&self, x: &[T], rows: usize, out: &mut [T]) {
        for r in 0..rows {
            out[r * self.out_dim..(r + 1) * self.out_dim].copy_from_slice(&self.bias);
        }
        T::gemm_raw(
            rows,
            self.in_dim,
            self.out_dim,
            T::one(),
            x,
            false,
            &self.weight,
            false,
            T::one(),
            out,
        );
    }

    pub fn apply(&self, x: &[T], rows: usize) -> Result<Vec<T>, OutOfMemory> {
        let mut out = try_zeroed(rows * self.out_dim)?;
        self.apply_into(x, rows, &mut out);
        Ok(out)
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    let limit = T::from_f64(20.0);
    if x > limit {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Conv, SSM and gate of one layer.
#[derive(Debug, Clone)]
pub struct CoreKernel<T> {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub d_conv: usize,
    conv_weight: Vec<T>,
    conv_bias: Vec<T>,
    /// `-exp(a_log)`
    a: Vec<T>,
    x_proj: Dense<T>,
    dt_proj: Dense<T>,
}

impl<T: Scalar> CoreKernel<T> {
    pub fn from_core(core: &MambaCore, store: &ParamStore) -> CoreKernel<T> {
        CoreKernel {
            d_inner: core.d_inner,
            d_state: core.ssm.d_state,
            dt_rank: core.ssm.dt_rank,
            d_conv: core.d_conv,
            conv_weight: cast(store.value(core.conv_weight)),
            conv_bias: cast(store.value(core.conv_bias)),
            a: store
                .value(core.ssm.a_log)
                .iter()
                .map(|&v| T::from_f64(-v.exp()))
                .collect(),
            x_proj: Dense::from_linear(&core.ssm.x_proj, store),
            dt_proj: Dense::from_linear(&core.ssm.dt_proj, store),
        }
    }

    /// `[T, 2 * d_inner]` in-projected rows to `[T, d_inner]` gated output.
    pub fn forward(&self, projected: &[T], t_len: usize) -> Result<Vec<T>, OutOfMemory> {
        let (d, n, r, k) = (self.d_inner, self.d_state, self.dt_rank, self.d_conv);
        debug_assert_eq!(projected.len(), t_len * 2 * d);

        let mut value = try_zeroed::<T>(t_len * d)?;
        for t in 0..t_len {
            let row = &mut value[t * d..(t + 1) * d];
            row.copy_from_slice(&self.conv_bias);
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(k - 1) else {
                    continue;
                };
                let src = &projected[s * 2 * d..s * 2 * d + d];
                let w = &self.conv_weight[j * d..(j + 1) * d];
                for c in 0..d {
                    row[c] = row[c] + w[c] * src[c];
                }
            }
            for v in row.iter_mut() {
                *v = *v * sigmoid(*v);
            }
        }

        let proj = self.x_proj.apply(&value, t_len)?;
        let width = r + 2 * n;
        let mut dt_in = try_zeroed::<T>(t_len * r)?;
        for t in 0..t_len {
            dt_in[t * r..(t + 1) * r].copy_from_slice(&proj[t * width..t * width + r]);
        }
        let mut delta = self.dt_proj.apply(&dt_in, t_len)?;
        drop(dt_in);
        for v in delta.iter_mut() {
            *v = softplus(*v);
        }

        let mut out = try_zeroed::<T>(t_len * d)?;
        let mut h = vec![T::zero(); d * n];
        for t in 0..t_len {
            let b = &proj[t * width + r..t * width + r + n];
            let c = &proj[t * width + r + n..(t + 1) * width];
            let gate = &projected[t * 2 * d + d..(t + 1) * 2 * d];
            for ch in 0..d {
                let dt = delta[t * d + ch];
                let du = dt * value[t * d + ch];
                let hr = &mut h[ch * n..(ch + 1) * n];
                let ar = &self.a[ch * n..(ch + 1) * n];
                let mut acc = T::zero();
                for s in 0..n {
                    hr[s] = (dt * ar[s]).exp() * hr[s] + du * b[s];
                    acc = acc + c[s] * hr[s];
                }
                let g = gate[ch];
                out[t * d + ch] = acc * g * sigmoid(g);
            }
        }
        Ok(out)
    }
}

/// Inference form of a [`MambaLayer`].
#[derive(Debug, Clone)]
pub struct MambaKernel<T> {
    pub d_model: usize,
    in_proj: Dense<T>,
    core: CoreKernel<T>,
    out_proj: Dense<T>,
}

impl<T: Scalar> MambaKernel<T> {
    pub fn from_layer(layer: &MambaLayer, store: &ParamStore) -> MambaKernel<T> {
        MambaKernel {
            d_model: layer.d_model,
            in_proj: Dense::from_linear(&layer.in_proj, store),
            core: CoreKernel::from_core(&layer.core, store),
            out_proj: Dense::from_linear(&layer.out_proj, store),
        }
    }

    /// `x: [T, d_model]` row-major.
    pub fn forward(&self, x: &[T], t_len: usize) -> Result<Vec<T>, OutOfMemory> {
        debug_assert_eq!(x.len(), t_len * self.d_model);
        let projected = self.in_proj.apply(x, t_len)?;
        let y = self.core.forward(&projected, t_len)?;
        drop(projected);
        let mut out = try_zeroed::<T>(t_len * self.d_model)?;
        out.copy_from_slice(x);
        // out = x + y W_out + b_out
        for row in out.chunks_mut(self.d_model) {
            for (o, b) in row.iter_mut().zip(&self.out_proj.bias) {
                *o = *o + *b;
            }
        }
        T::gemm_raw(
            t_len,
            self.out_proj.in_dim,
            self.d_model,
            T::one(),
            &y,
            false,
            &self.out_proj.weight,
            false,
            T::one(),
            &mut out,
        );
        Ok(out)
    }
}
