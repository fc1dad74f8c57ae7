//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and a gradient closure.
//! `backward` walks the nodes once in reverse insertion order, which is a
//! valid topological order because inputs always precede their consumers.
//! Gradients accumulate into one buffer per node in a single-writer pass.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a gradient closure sees during the backward pass.
pub struct BackwardArgs<'a> {
    /// Gradient flowing into this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

pub type GradFn = Box<dyn Fn(&BackwardArgs<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
    op: &'static str,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, op: &'static str, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            requires_grad,
            op,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, "constant", None)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, "variable", None)
    }

    /// Loads a parameter. Frozen parameters enter as constants, so they get
    /// no gradient buffer at all.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(p.value.clone(), !p.frozen, "param", Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. The forward value is checked for NaN/Inf here so a bad
    /// value is reported at the op that produced it.
    pub fn record(&mut self, op: &'static str, inputs: &[Var], value: Tensor, grad_fn: GradFn) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op,
                node,
                path: self.path_of(inputs),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
            op,
            param: None,
        });
        Ok(Var(node))
    }

    fn path_of(&self, inputs: &[Var]) -> String {
        inputs
            .iter()
            .map(|v| format!("{}#{}", self.nodes[v.0].op, v.0))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Backpropagates from a single-element root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward root must hold one value, holds {numel}"
            )));
        }
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                expected: self.shape(root).to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(grad_fn) = &node.grad_fn else { continue };
            // intermediate gradients are dropped once consumed; leaves keep theirs
            let Some(grad) = grads[idx].take() else { continue };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = grad_fn(&args)?;
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(args.needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if !g.is_finite() {
                    return Err(TensorError::NonFinite {
                        op: node.op,
                        node: idx,
                        path: format!("grad -> {}#{}", self.nodes[input.0].op, input.0),
                    });
                }
                debug_assert_eq!(g.shape(), self.shape(*input), "grad shape from {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients per parameter, summed over every load of the same parameter.
    pub fn by_param(&self) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for &(node, id) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(id, g.clone());
                }
            }
        }
        out
    }
}
