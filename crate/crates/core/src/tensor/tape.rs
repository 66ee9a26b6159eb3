use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::Op;
use super::Tensor;
use crate::error::{fmt_shape, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in op set.
///
/// `backward` returns the gradient contribution for each input (in the order
/// the inputs were passed to [`Tape::custom`]); `None` means no contribution.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records operations in execution order and runs reverse-mode differentiation.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) values: Vec<Tensor>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves that require gradients get a
    /// zero-filled gradient slot immediately.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            op: Op::Leaf,
            requires_grad,
        });
        self.values.push(value);
        self.grads.push(grad);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, requires_grad });
        self.values.push(value);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient accumulated into `v`, if it participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Label of the operation that produced `v`.
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Resets every gradient slot to zero.
    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Records an externally defined differentiable operation whose forward
    /// value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            requires_grad,
        )
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Intermediate gradients are recomputed from scratch on every call while
    /// leaf gradients accumulate, so two calls without [`Tape::zero_grad`]
    /// double the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.values[loss.0].shape();
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(shape)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        let seed = self.grads[loss.0].get_or_insert_with(|| vec![0.0]);
        seed[0] += 1.0;

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let (before, _) = self.grads.split_at_mut(i);
            let mut acc = GradSink {
                grads: before,
                nodes: &self.nodes[..i],
                values: &self.values[..i],
            };
            self.nodes[i]
                .op
                .backward(&self.values, i, &grad_out, &mut acc);
            self.grads[i] = Some(grad_out);
        }
        Ok(())
    }
}

/// Write access to the gradients of nodes recorded before the one being
/// differentiated.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
    values: &'a [Tensor],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer of `v`, allocated on first touch; `None` when
    /// `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn add(&mut self, v: Var, contribution: &[f64]) {
        if let Some(g) = self.slot(v) {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
    }
}
