//! Forward-only modality-aware layer. Each modality's expert is merged with
//! the shared expert ahead of time, so routing costs one lookup per run of
//! equal ids.

use crate::mem::{try_zeroed, OutOfMemory};
use crate::params::ParamStore;
use crate::ssm::infer::{CoreKernel, Dense};
use crate::tensor::Scalar;

use super::{ExpertSet, MoEMambaLayer, ModalityId, MoeError, Routing};

fn merged<T: Scalar>(set: &ExpertSet, store: &ParamStore) -> Vec<Dense<T>> {
    let shared = Dense::<f64>::from_linear(&set.shared, store);
    set.specific
        .iter()
        .map(|e| {
            let d = Dense::<f64>::from_linear(e, store);
            let add =
                |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| T::from_f64(x + y)).collect();
            Dense {
                in_dim: d.in_dim,
                out_dim: d.out_dim,
                weight: add(&d.weight, &shared.weight),
                bias: add(&d.bias, &shared.bias),
            }
        })
        .collect()
}

/// Applies `maps[ids[t]]` to each row, one GEMM per run of equal ids.
fn routed_apply<T: Scalar>(
    maps: &[Dense<T>],
    x: &[T],
    ids: &[ModalityId],
) -> Result<Vec<T>, OutOfMemory> {
    let (i_dim, o_dim) = (maps[0].in_dim, maps[0].out_dim);
    let mut out = try_zeroed::<T>(ids.len() * o_dim)?;
    let mut start = 0;
    while start < ids.len() {
        let m = ids[start];
        let end = ids[start..]
            .iter()
            .position(|&k| k != m)
            .map_or(ids.len(), |k| start + k);
        maps[m].apply_into(
            &x[start * i_dim..end * i_dim],
            end - start,
            &mut out[start * o_dim..end * o_dim],
        );
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MoEMambaKernel<T> {
    pub d_model: usize,
    moe_in: Vec<Dense<T>>,
    core: CoreKernel<T>,
    moe_out: Vec<Dense<T>>,
}

impl<T: Scalar> MoEMambaKernel<T> {
    /// Only deterministic routing has a merged form.
    pub fn from_layer(
        layer: &MoEMambaLayer,
        store: &ParamStore,
    ) -> Result<MoEMambaKernel<T>, MoeError> {
        if layer.routing != Routing::Deterministic {
            return Err(MoeError::Unsupported(
                "merged kernel needs deterministic routing",
            ));
        }
        Ok(MoEMambaKernel {
            d_model: layer.d_model,
            moe_in: merged(&layer.moe_in, store),
            core: CoreKernel::from_core(&layer.core, store),
            moe_out: merged(&layer.moe_out, store),
        })
    }

    pub fn modalities(&self) -> usize {
        self.moe_in.len()
    }

    /// `x: [T, d_model]` row-major; ids must be in range.
    pub fn forward(&self, x: &[T], ids: &[ModalityId]) -> Result<Vec<T>, OutOfMemory> {
        let t_len = ids.len();
        debug_assert_eq!(x.len(), t_len * self.d_model);
        debug_assert!(ids.iter().all(|&m| m < self.modalities()));
        let projected = routed_apply(&self.moe_in, x, ids)?;
        let y = self.core.forward(&projected, t_len)?;
        drop(projected);
        let mut out = routed_apply(&self.moe_out, &y, ids)?;
        for (o, v) in out.iter_mut().zip(x) {
            *o = *o + *v;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::MambaConfig;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_taped_forward() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = MambaConfig {
            d_state: 4,
            ..MambaConfig::default()
        };
        let l = MoEMambaLayer::new(
            &mut store,
            &mut rng,
            "f",
            6,
            3,
            &cfg,
            Routing::Deterministic,
        );
        let x = Tensor::from_fn(&[7, 6], |i| (i as f64 * 0.41).sin());
        let ids = [0, 0, 1, 1, 1, 2, 0];
        let want = l.forward(&store.bind(), &x, &ids).unwrap();
        let k = MoEMambaKernel::<f64>::from_layer(&l, &store).unwrap();
        let got = k.forward(x.data(), &ids).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
