//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is a
//! topological order by construction and a backward sweep visits each node
//! exactly once, last to first.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of one recorded operation.
pub(crate) trait Backward<T: Scalar> {
    /// Gradients with respect to each input; entries whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;

    /// Feeds the discrete choices of a piecewise-linear operation (active
    /// units, selected maxima) into `h`. Smooth operations record nothing.
    fn branches(&self, _output: &Tensor<T>, _h: &mut dyn Hasher) {}
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Per-parameter gradients collected from a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Binds a stored parameter into the tape (once per graph). Trainable
    /// entries become gradient-tracked leaves, buffers become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if store.is_trainable(id) { self.leaf(value) } else { self.constant(value) };
        self.bound.insert(id, v);
        v
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

    /// Gradient of the last backward target with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: Option<Box<dyn Backward<T>>>,
        leaf_requires_grad: bool,
    ) -> Var {
        let requires_grad = if op.is_some() {
            inputs.iter().any(|v| self.nodes[v.0].requires_grad)
        } else {
            leaf_requires_grad
        };
        // an op that nothing upstream needs is never differentiated
        let op = if requires_grad { op } else { None };
        self.nodes.push(Node { value, inputs, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `target`, seeded with ones.
    ///
    /// Intermediate gradients are released as soon as they have been
    /// propagated; leaf gradients stay available through [`Graph::grad`].
    pub fn backward(&mut self, target: Var) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[target.0].requires_grad {
            return;
        }
        self.grads[target.0] = Some(Tensor::full(self.nodes[target.0].value.shape(), T::one()));
        for i in (0..=target.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = self.grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let targets = node.inputs.clone();
            for ((var, g), need) in targets.into_iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[var.0].value.shape());
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    /// Hash of every discrete choice made by differentiable piecewise
    /// operations on the tape. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Some(op) = &node.op {
                op.branches(&node.value, &mut h);
            }
        }
        h.finish()
    }

    /// Gradients of every bound trainable parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (&id, &v) in &self.bound {
            if store.is_trainable(id) {
                grads[id.0] = Some(self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())));
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let c = g.add(a, b).unwrap();
        assert!(!g.requires_grad(c));
        g.backward(c);
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.add(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        g.backward(c);
        assert_eq!(g.grad(a).unwrap().item(), 3.0);
    }
}
