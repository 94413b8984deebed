//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are appended in execution order, so the node list is already a
//! topological order and the backward sweep is a single reverse scan that
//! visits each node at most once.
//!
//! Model weights live in a [`ParamStore`] outside the tape. [`Tape::param`]
//! copies a weight onto the tape once per pass; after [`Tape::backward`],
//! [`Tape::accumulate_param_grads`] adds the resulting gradients into the
//! store. Weights that are not trainable enter the tape as constants, so no
//! gradient is ever formed for them.

pub mod kernels;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use ops::BatchStats;
pub(crate) use ops::{rope_tables, Op};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient; used for evaluation.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input; it tracks gradients when the tensor does.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad() && self.grad_enabled;
        self.push_leaf(tensor, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_leaf(tensor, false)
    }

    fn push_leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored weight on the tape, at most once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = p.trainable() && self.grad_enabled;
        let v = self.push_leaf(p.tensor.clone(), rg);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// node that depends on a gradient-tracking leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visits[idx] += 1;
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    /// Adds the gradients of every trainable weight used on this tape into
    /// the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.tensor_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// `backward` followed by `accumulate_param_grads`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store)?;
        Ok(grads)
    }

    /// Adds `delta` into the gradient slot of `v`, allocating it on first use.
    pub(crate) fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visits: Vec<u32>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// How many times each node was processed by the sweep (0 or 1).
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

#[cfg(test)]
mod tests;
