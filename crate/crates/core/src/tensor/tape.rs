use std::sync::{Arc, Mutex, MutexGuard};

use super::{numel, DType, Result, Tensor, TensorError};

/// Given the gradient of an op's output and a mask of which inputs need a
/// gradient, returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    op: &'static str,
    shape: Vec<usize>,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of operations for one forward pass.
///
/// Nodes are pushed as operations execute, so every node's inputs precede
/// it. A tape is consumed by [`Tape::backward`]; recording on a consumed
/// tape fails with [`TensorError::TapeConsumed`].
#[derive(Clone, Default)]
pub struct Tape {
    inner: Arc<Mutex<TapeInner>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn lock(&self) -> MutexGuard<'_, TapeInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf. Storage is shared.
    pub fn leaf(&self, value: Tensor) -> Tensor {
        let id = self
            .push(Node {
                op: "leaf",
                shape: value.shape.clone(),
                inputs: Vec::new(),
                backward: None,
            })
            .expect("leaf registered on a consumed tape");
        Tensor {
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
            ..value.detach()
        }
    }

    /// Operation names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.lock().nodes.iter().map(|n| n.op).collect()
    }

    fn push(&self, node: Node) -> Result<usize> {
        let mut inner = self.lock();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.nodes.push(node);
        Ok(inner.nodes.len() - 1)
    }

    /// Propagates gradients from a single-element `loss` to every leaf.
    ///
    /// A loss that is not recorded on this tape (a constant) yields zero
    /// gradients for all leaves.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape.clone()));
        }
        let start = match &loss.node {
            Some(n) if n.tape.same(self) => Some(n.id),
            Some(_) => return Err(TensorError::TapeMismatch),
            None => None,
        };
        let nodes = {
            let mut inner = self.lock();
            if inner.consumed {
                return Err(TensorError::TapeConsumed);
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.shape.clone()).collect();
        if let Some(id) = start {
            grads[id] = Some(vec![1.0]);
        }
        for (id, node) in nodes.into_iter().enumerate().rev() {
            let Some(backward) = node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(input), Some(ig)) = (input, ig) {
                    match &mut grads[*input] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += v;
                            }
                        }
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            grads,
            shapes,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl std::fmt::Debug for Gradients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gradients")
            .field("nodes", &self.grads.len())
            .field(
                "populated",
                &self.grads.iter().filter(|g| g.is_some()).count(),
            )
            .finish()
    }
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, zeros if the loss does not
    /// depend on it. `None` if `t` is not a leaf of this tape.
    pub fn get(&self, t: &Tensor) -> Option<Vec<f64>> {
        let node = t.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        match self.grads.get(node.id)? {
            Some(g) => Some(g.clone()),
            None => Some(vec![0.0; numel(&self.shapes[node.id])]),
        }
    }

    pub fn get_tensor(&self, t: &Tensor) -> Option<Tensor> {
        let g = self.get(t)?;
        Tensor::from_vec(t.shape.clone(), g).ok()
    }
}

/// Builds the output tensor of an operation, recording `backward` when any
/// input is tracked. Rejects non-finite output values.
pub(crate) fn record<F>(
    op: &'static str,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    mut data: Vec<f64>,
    backward: F,
) -> Result<Tensor>
where
    F: FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static,
{
    debug_assert_eq!(numel(&shape), data.len(), "{op}");
    let dtype = if !inputs.is_empty() && inputs.iter().all(|t| t.dtype == DType::F32) {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
        DType::F32
    } else {
        DType::F64
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            op,
            index,
            value: data[index],
            shape,
        });
    }

    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if !existing.same(&n.tape) => return Err(TensorError::TapeMismatch),
                Some(_) => {}
            }
        }
    }
    let node = match tape {
        None => None,
        Some(tape) => {
            let id = tape.push(Node {
                op,
                shape: shape.clone(),
                inputs: inputs
                    .iter()
                    .map(|t| t.node.as_ref().map(|n| n.id))
                    .collect(),
                backward: Some(Box::new(backward)),
            })?;
            Some(NodeRef {
                tape: tape.clone(),
                id,
            })
        }
    };
    Ok(Tensor {
        shape,
        dtype,
        data: Arc::new(data),
        node,
    })
}
