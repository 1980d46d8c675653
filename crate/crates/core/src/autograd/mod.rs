//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so every input of a node has a
//! smaller index than the node itself. Backward walks indices in reverse,
//! which is a valid topological order and makes gradient accumulation
//! deterministic for a given graph.

mod gradcheck;
mod ops;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use gradcheck::{finite_diff_check, GradCheckReport};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Backward rule for operations evaluated outside the tape (for example the
/// sharded expert layer in `parallel`). Returns one optional gradient per
/// declared input, in order.
pub trait CustomBackward<S: Real>: Send + Sync {
    fn backward(&self, grad_out: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>>;
}

pub(crate) enum Op<S: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Softmax(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows(Var),
    MulCol(Var, Var),
    SumAll(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<S>,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<S>>,
    },
}

pub(crate) struct Node<S: Real> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// A computation tape.
pub struct Graph<S: Real> {
    pub(crate) nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that optionally tracks gradient.
    pub fn input(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Named parameter leaf; repeated lookups of one name return the same node.
    pub fn param(&mut self, name: &str, t: &Tensor<S>, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.input(t.clone(), requires_grad);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a value computed outside the tape together with its backward rule.
    pub fn custom(&mut self, value: Tensor<S>, inputs: Vec<Var>, rule: Box<dyn CustomBackward<S>>) -> Var {
        let rg = self.rg(&inputs);
        self.push(value, Op::Custom { inputs, rule }, rg)
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::shape("backward (scalar root)", v.shape(), &[1]));
        }
        self.backward_with(root, Tensor::full(v.shape(), S::one()))
    }

    /// Backpropagates an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape("backward seed", seed.shape(), self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Gradients of every named parameter that received one.
    pub fn param_grads(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Result of a backward pass.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
