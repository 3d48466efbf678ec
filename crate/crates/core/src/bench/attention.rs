use rand::Rng;

use crate::mem::{try_zeroed, OutOfMemory};
use crate::params::{Linear, ParamStore};
use crate::ssm::infer::Dense;
use crate::tensor::Scalar;

/// Single-head scaled dot-product attention with a residual,
/// `x + softmax(q k^T / sqrt(d)) v W_o`. The whole score matrix is
/// materialized, so memory grows with `T^2`.
#[derive(Debug, Clone)]
pub struct AttentionBaseline<T> {
    pub d_model: usize,
    query: Dense<T>,
    key: Dense<T>,
    value: Dense<T>,
    out: Dense<T>,
}

impl<T: Scalar> AttentionBaseline<T> {
    pub fn new(rng: &mut impl Rng, d_model: usize) -> AttentionBaseline<T> {
        let mut store = ParamStore::new();
        let mut dense = |name: &str| {
            let lin = Linear::new(&mut store, rng, name, d_model, d_model, true, 1.0);
            Dense::from_linear(&lin, &store)
        };
        AttentionBaseline {
            d_model,
            query: dense("attn.q"),
            key: dense("attn.k"),
            value: dense("attn.v"),
            out: dense("attn.o"),
        }
    }

    pub fn forward(&self, x: &[T], t_len: usize) -> Result<Vec<T>, OutOfMemory> {
        let d = self.d_model;
        debug_assert_eq!(x.len(), t_len * d);
        let q = self.query.apply(x, t_len)?;
        let k = self.key.apply(x, t_len)?;
        let v = self.value.apply(x, t_len)?;

        let mut scores = try_zeroed::<T>(t_len * t_len)?;
        let scale = T::one() / T::from_f64(d as f64).sqrt();
        T::gemm_raw(
            t_len,
            d,
            t_len,
            scale,
            &q,
            false,
            &k,
            true,
            T::zero(),
            &mut scores,
        );
        drop((q, k));
        for row in scores.chunks_mut(t_len) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                sum = sum + *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }

        let mut ctx = try_zeroed::<T>(t_len * d)?;
        T::gemm_raw(
            t_len,
            t_len,
            d,
            T::one(),
            &scores,
            false,
            &v,
            false,
            T::zero(),
            &mut ctx,
        );
        drop((scores, v));
        let mut y = self.out.apply(&ctx, t_len)?;
        for (o, xi) in y.iter_mut().zip(x) {
            *o = *o + *xi;
        }
        Ok(y)
    }
}
