use std::cell::RefCell;
use std::fmt;

use super::ops::Op;
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
    /// Caller-visible tensor that receives this node's gradient (tracked leaves).
    leaf: Option<Tensor<T>>,
    retain: bool,
    grad: Option<Vec<T>>,
}

struct Inner<T: Element> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

/// Append-only record of operations for one forward/backward pass.
///
/// Node ids are insertion indices, so every node's inputs precede it and the
/// reverse of insertion order is a valid backward schedule. [`Tape::clear`]
/// drops every node at once and invalidates all outstanding [`Var`]s.
pub struct Tape<T: Element> {
    inner: RefCell<Inner<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(Inner { nodes: Vec::new(), generation: 0 }) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// Register a tensor. Tensors that require grad become tracked leaves whose
    /// gradient cell is filled by [`Var::backward`].
    pub fn var(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let leaf = tensor.requires_grad().then(|| tensor.clone());
        self.push_node(Node {
            value: tensor.detach(),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: leaf.is_some(),
            leaf,
            retain: false,
            grad: None,
        })
    }

    /// Register a tensor as a constant regardless of its `requires_grad` flag.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: tensor.detach(),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
            leaf: None,
            retain: false,
            grad: None,
        })
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(node);
        Var { tape: self, id, generation: inner.generation }
    }

    /// Record an op result. `op` is replaced by a constant marker when no
    /// input requires grad, so saved buffers are dropped.
    pub(crate) fn push_op(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var<'_, T> {
        let requires_grad = self.any_requires_grad(&inputs);
        self.push_node(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            inputs,
            requires_grad,
            leaf: None,
            retain: false,
            grad: None,
        })
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn check(&self, var: &Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(var.tape, self) || var.generation != self.inner.borrow().generation {
            return Err(Error::DetachedFromTape);
        }
        Ok(())
    }

    fn backward(&self, root: usize) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let root_node = &inner.nodes[root];
        if root_node.value.numel() != 1 {
            return Err(Error::NotScalar(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = {
                let nodes = &inner.nodes;
                let node = &nodes[id];
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                if needs.iter().any(|&n| n) {
                    node.op.backward(node, &g, nodes, &needs)
                } else {
                    Vec::new()
                }
            };
            let inputs = inner.nodes[id].inputs.clone();
            for (slot, contribution) in contributions.into_iter().enumerate() {
                let Some(delta) = contribution else { continue };
                let target = inputs[slot];
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    empty => *empty = Some(delta),
                }
            }
            let node = &mut inner.nodes[id];
            if let Some(leaf) = &node.leaf {
                leaf.accumulate_grad(&g);
            } else if node.retain {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Element> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
    generation: u64,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    pub(crate) fn live(&self) -> Result<()> {
        self.tape.check(self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        self.live()?;
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::DetachedFromTape);
        }
        other.live()
    }

    pub fn value(&self) -> Result<Tensor<T>> {
        self.live()?;
        Ok(self.tape.value(self.id))
    }

    pub fn shape(&self) -> Result<Vec<usize>> {
        Ok(self.value()?.shape().to_vec())
    }

    pub fn requires_grad(&self) -> Result<bool> {
        self.live()?;
        Ok(self.tape.node_requires_grad(self.id))
    }

    /// Keep this intermediate node's gradient after backward.
    pub fn retain_grad(&self) -> Result<()> {
        self.live()?;
        self.tape.inner.borrow_mut().nodes[self.id].retain = true;
        Ok(())
    }

    /// Gradient accumulated at this node: the leaf's cell for tracked leaves,
    /// the retained buffer for intermediates.
    pub fn grad(&self) -> Result<Option<Tensor<T>>> {
        self.live()?;
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if let Some(leaf) = &node.leaf {
            return Ok(leaf.grad());
        }
        Ok(node.grad.as_ref().map(|g| Tensor::from_parts(node.value.shape(), g.clone(), false)))
    }

    /// Reverse-mode sweep from this single-element node. Gradients accumulate
    /// across calls until the leaves are zeroed.
    pub fn backward(&self) -> Result<()> {
        self.live()?;
        self.tape.backward(self.id)
    }
}
