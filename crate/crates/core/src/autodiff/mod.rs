//! Eager reverse-mode differentiation over [`Tensor`] operations.
//!
//! Every differentiable call on a [`Tape`] computes its value immediately
//! and records the op. [`Tape::backward`] replays the record in reverse.
//!
//! Gradient contributions are produced in the dtype of the input they flow
//! into (so F16 inputs receive F16-rounded contributions), but a node that
//! feeds several consumers sums those contributions in an FP32 accumulator.
//! The accumulated gradient is rounded to the node dtype once, just before
//! the node's own backward rule consumes it.

mod grads;
mod ops;

pub use grads::GradientSet;
pub use ops::attention_weights;

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Variable {
        name: String,
        trainable: bool,
    },
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Var, Var),
    Stack(Vec<Var>),
    Attention {
        query: Var,
        keys: Var,
        lengths: Vec<usize>,
    },
    SelectTime {
        states: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<f32>,
    },
    ReduceMean(Var),
    ReduceSum(Var),
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Variable { .. } | Op::Constant)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Records operations in execution order.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    compute: DType,
    names: HashSet<String>,
}

impl Tape {
    /// `compute` is the dtype used for constants and new activations
    /// (F16 under mixed precision, F32 otherwise).
    pub fn new(compute: DType) -> Self {
        Self {
            nodes: Vec::new(),
            compute,
            names: HashSet::new(),
        }
    }

    pub fn compute_dtype(&self) -> DType {
        self.compute
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named model variable. Names must be unique per tape.
    pub fn variable(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::InvalidArgument(format!(
                "variable '{name}' registered twice"
            )));
        }
        Ok(self.push(
            value,
            Op::Variable {
                name: name.to_string(),
                trainable,
            },
        ))
    }

    /// A non-trainable input, stored as given.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Bytes held by intermediate tensors kept for the backward pass:
    /// every non-leaf node except scalar results (losses and reductions).
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.op.is_leaf() && n.value.rank() > 0)
            .map(|n| n.value.size_in_bytes())
            .sum()
    }

    /// Number of activation elements, see [`Tape::activation_bytes`].
    pub fn activation_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.op.is_leaf() && n.value.rank() > 0)
            .map(|n| n.value.numel())
            .sum()
    }

    /// Gradients of `seed · loss` with respect to every trainable variable
    /// reachable from `loss`. Seeding with a loss scale `S` multiplies every
    /// gradient by `S`. Non-finite values propagate; nothing is checked.
    pub fn backward(&self, loss: Var, seed: f32) -> Result<GradientSet> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        acc[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = acc[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.is_leaf() {
                acc[i] = Some(g);
                continue;
            }
            let upstream = Tensor::from_f32_as(node.value.shape().to_vec(), g, node.value.dtype())?;
            ops::backward_rule(self, Var(i), &upstream, &mut acc)?;
        }

        let mut grads = GradientSet::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Variable {
                name,
                trainable: true,
            } = &node.op
            {
                if let Some(g) = acc[i].take() {
                    let t =
                        Tensor::from_f32_as(node.value.shape().to_vec(), g, node.value.dtype())?;
                    grads.insert(name.clone(), t);
                }
            }
        }
        Ok(grads)
    }
}

/// Adds a contribution into an FP32 accumulator slot.
pub(crate) fn accumulate(acc: &mut [Option<Vec<f32>>], v: Var, contribution: &Tensor) {
    let vals = contribution.to_f32_vec();
    match &mut acc[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(vals) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(vals),
    }
}
