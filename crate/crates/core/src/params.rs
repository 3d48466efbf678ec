//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass first
//! [binds](ParamStore::bind) the store, either as constants or as leaves of a
//! tape, and layers read their weights from the resulting [`Bound`] set.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Result, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

impl Param {
    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter. Panics on a duplicate name or a value that does
    /// not fill `shape`; both are construction bugs.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "parameter {name}: value does not fill shape {shape:?}"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.params[id.0].value).as_mut_slice()
    }

    pub fn set(&mut self, id: ParamId, value: Vec<f64>) {
        assert_eq!(value.len(), self.params[id.0].value.len());
        self.params[id.0].value = Arc::new(value);
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let p = &self.params[id.0];
        Tensor::from_shared(p.shape.clone(), Arc::clone(&p.value)).expect("shape checked on add")
    }

    /// Every parameter as an untracked constant.
    pub fn bind(&self) -> Bound {
        Bound {
            tensors: self.ids().map(|id| self.tensor(id)).collect(),
        }
    }

    /// Every parameter as a differentiable leaf of `tape`.
    pub fn bind_on(&self, tape: &Tape) -> Bound {
        Bound {
            tensors: self.ids().map(|id| tape.leaf(self.tensor(id))).collect(),
        }
    }
}

/// Parameters materialized as tensors for one forward pass.
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

impl Index<ParamId> for Bound {
    type Output = Tensor;

    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Uniform values in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Dense affine map `x W + b` with `W: [in, out]` and `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform initialization scaled by `gain`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
    ) -> Linear {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            uniform(rng, in_dim * out_dim, bound),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                &[1, out_dim],
                uniform(rng, out_dim, bound),
            )
        });
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&p[self.weight])?;
        match self.bias {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }
}
