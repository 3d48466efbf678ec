//! Modality-aware Mamba layer: the in/out projections become a shared
//! expert plus one expert per modality, around a shared conv/SSM core.

pub mod infer;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::ssm::{check_input, MambaConfig, MambaCore, SsmError};
use crate::tensor::{routed_linear, Tensor, TensorError};

/// Index into the configured modality list.
pub type ModalityId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error("modality id {id} out of range for {count} modalities")]
    UnknownModality { id: ModalityId, count: usize },
    #[error("{ids} modality ids for {tokens} tokens")]
    IdLength { ids: usize, tokens: usize },
    #[error("{0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Each token goes to the expert of the modality it came from.
    #[default]
    Deterministic,
    /// A softmax gate picks the top-1 specific expert; ties go to the
    /// lowest index.
    Learnable,
}

/// One specific expert per modality plus a shared one, all the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    pub specific: Vec<Linear>,
    pub shared: Linear,
}

/// Specific experts start at this fraction of the fan-in scale.
pub const SPECIFIC_GAIN: f64 = 0.1;

impl ExpertSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        modalities: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> ExpertSet {
        let shared = Linear::new(
            store,
            rng,
            &format!("{name}.shared"),
            in_dim,
            out_dim,
            true,
            1.0,
        );
        let specific = (0..modalities)
            .map(|m| {
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.expert{m}"),
                    in_dim,
                    out_dim,
                    true,
                    SPECIFIC_GAIN,
                )
            })
            .collect();
        ExpertSet { specific, shared }
    }

    pub fn len(&self) -> usize {
        self.specific.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specific.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.shared.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.shared.out_dim
    }

    fn check_ids(&self, ids: &[ModalityId], tokens: usize) -> Result<(), MoeError> {
        if ids.len() != tokens {
            return Err(MoeError::IdLength {
                ids: ids.len(),
                tokens,
            });
        }
        if let Some(&id) = ids.iter().find(|&&m| m >= self.len()) {
            return Err(MoeError::UnknownModality {
                id,
                count: self.len(),
            });
        }
        Ok(())
    }

    fn specific_only(&self, p: &Bound, x: &Tensor, route: &[usize]) -> Result<Tensor, MoeError> {
        let ws: Vec<&Tensor> = self.specific.iter().map(|l| &p[l.weight]).collect();
        let bs: Vec<&Tensor> = self
            .specific
            .iter()
            .map(|l| &p[l.bias.expect("experts carry a bias")])
            .collect();
        Ok(routed_linear(x, route, &ws, &bs)?)
    }

    /// `specific[ids[t]](x[t]) + shared(x[t])` for every row.
    pub fn forward(&self, p: &Bound, x: &Tensor, ids: &[ModalityId]) -> Result<Tensor, MoeError> {
        self.check_ids(ids, x.shape()[0])?;
        let routed = self.specific_only(p, x, ids)?;
        Ok(self.shared.forward(p, x)?.add(&routed)?)
    }

    /// Like [`forward`](Self::forward) with the specific term scaled per
    /// row by `weight: [T, 1]`.
    pub fn forward_weighted(
        &self,
        p: &Bound,
        x: &Tensor,
        route: &[usize],
        weight: &Tensor,
    ) -> Result<Tensor, MoeError> {
        self.check_ids(route, x.shape()[0])?;
        let routed = self.specific_only(p, x, route)?.mul(weight)?;
        Ok(self.shared.forward(p, x)?.add(&routed)?)
    }

    /// Projects tokens `h: [T, in]` that all belong to modality `m`.
    pub fn project(&self, p: &Bound, h: &Tensor, m: ModalityId) -> Result<Tensor, MoeError> {
        if m >= self.len() {
            return Err(MoeError::UnknownModality {
                id: m,
                count: self.len(),
            });
        }
        Ok(self.specific[m]
            .forward(p, h)?
            .add(&self.shared.forward(p, h)?)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(&self.shared)
            .chain(&self.specific)
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }
}

/// Mamba layer whose in/out projections are [`ExpertSet`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEMambaLayer {
    pub d_model: usize,
    pub moe_in: ExpertSet,
    pub core: MambaCore,
    pub moe_out: ExpertSet,
    pub routing: Routing,
    /// `d_model -> modalities` gate, present under learnable routing.
    pub gate: Option<Linear>,
}

/// Top-1 index per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl MoEMambaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        modalities: usize,
        cfg: &MambaConfig,
        routing: Routing,
    ) -> MoEMambaLayer {
        let d_inner = cfg.d_inner(d_model);
        let moe_in = ExpertSet::new(
            store,
            rng,
            &format!("{name}.moe_in"),
            modalities,
            d_model,
            2 * d_inner,
        );
        let core = MambaCore::new(store, rng, name, d_model, cfg);
        let moe_out = ExpertSet::new(
            store,
            rng,
            &format!("{name}.moe_out"),
            modalities,
            d_inner,
            d_model,
        );
        let gate = (routing == Routing::Learnable).then(|| {
            Linear::new(
                store,
                rng,
                &format!("{name}.gate"),
                d_model,
                modalities,
                true,
                1.0,
            )
        });
        MoEMambaLayer {
            d_model,
            moe_in,
            core,
            moe_out,
            routing,
            gate,
        }
    }

    pub fn modalities(&self) -> usize {
        self.moe_in.len()
    }

    /// Gate probabilities `[T, modalities]` under learnable routing.
    pub fn gate_probs(&self, p: &Bound, x: &Tensor) -> Result<Tensor, MoeError> {
        let gate = self
            .gate
            .ok_or(MoeError::Unsupported("layer has no gate"))?;
        Ok(gate.forward(p, x)?.softmax(1)?)
    }

    /// `x: [T, d_model]` with one modality id per token.
    pub fn forward(&self, p: &Bound, x: &Tensor, ids: &[ModalityId]) -> Result<Tensor, MoeError> {
        check_input(x, self.d_model)?;
        self.moe_in.check_ids(ids, x.shape()[0])?;
        let y = match self.routing {
            Routing::Deterministic => {
                let projected = self.moe_in.forward(p, x, ids)?;
                let y = self.core.forward(p, &projected)?;
                self.moe_out.forward(p, &y, ids)?
            }
            Routing::Learnable => {
                let probs = self.gate_probs(p, x)?;
                let route = argmax_rows(&probs);
                let w = probs.pick(&route)?;
                let projected = self.moe_in.forward_weighted(p, x, &route, &w)?;
                let y = self.core.forward(p, &projected)?;
                self.moe_out.forward_weighted(p, &y, &route, &w)?
            }
        };
        Ok(y.add(x)?)
    }
}

/// Per-token modality ids for sequences concatenated in order.
pub fn segment_ids(lengths: &[usize]) -> Vec<ModalityId> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(m, &t)| std::iter::repeat(m).take(t))
        .collect()
}
