use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::{ParamId, ParamStore};
use crate::{Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

pub(super) struct Node {
    pub(super) value: Rc<Tensor>,
    pub(super) grad: Option<Vec<f64>>,
    pub(super) requires_grad: bool,
    pub(super) op: Op,
    pub(super) param: Option<ParamId>,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    pub(super) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(Rc::new(value), false, None)
    }

    /// A free variable whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(Rc::new(value), true, None)
    }

    /// A trainable parameter; its gradient can be collected with
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.shared_value(id), true, Some(id))
    }

    fn push_leaf(&mut self, value: Rc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    /// Back-propagates from a one-element `loss`, adding `∂loss/∂leaf` onto
    /// every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                ref op => op.backward(self, i, &g, &mut grads),
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient buffer for `var` during backward, allocated on first use.
    /// `None` when `var` does not take part in differentiation.
    pub(super) fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }
}
