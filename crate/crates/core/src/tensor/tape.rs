use super::{Scalar, Tensor};
use crate::error::{Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Expand { x: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    Softmax { x: Var },
    ReduceMean { x: Var, axis: usize },
    ReduceMax { x: Var, axis: usize, argmax: Vec<usize> },
    SumAll { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2d { x: Var, k: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::BatchMatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Expand { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Sin { x }
            | Op::Cos { x }
            | Op::Softmax { x }
            | Op::ReduceMean { x, .. }
            | Op::ReduceMax { x, .. }
            | Op::SumAll { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::AvgPool2d { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor<T>, rule: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = rule.inputs().iter().all(|v| self.nodes[v.0].value.all_finite());
            if inputs_finite {
                return Err(TensorError::NonFinite { op }.into());
            }
        }
        let requires_grad = rule.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: rule,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that requires grad and is reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, None, &[])
    }

    /// Like [`Tape::backward`], additionally keeping the gradients of the
    /// intermediate nodes in `retain` (leaf gradients are always kept).
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, None, retain)
    }

    /// Like [`Tape::backward`] but seeds the sweep with `d(loss)` instead of 1;
    /// the seeded node may be non-scalar.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.backward_from_retaining(output, seed, &[])
    }

    pub fn backward_from_retaining(&self, output: Var, seed: Tensor<T>, retain: &[Var]) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(crate::error::shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        self.backward_with_seed(output, Some(seed), retain)
    }

    fn backward_with_seed(
        &self,
        loss: Var,
        seed: Option<Tensor<T>>,
        retain: &[Var],
    ) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape.into());
        }
        let root = &self.nodes[loss.0].value;
        let seed = match seed {
            Some(s) => s,
            None => {
                if !root.is_scalar() {
                    return Err(TensorError::NotScalar(root.shape().to_vec()).into());
                }
                Tensor::full(root.shape(), T::one())
            }
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            super::ops::backprop(self, i, &g, &mut grads)?;
            if retain.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Leaves
/// that were not reachable from the loss have no entry.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Adds `delta` into the gradient slot of `v`, allocating on first use.
pub(crate) fn accumulate<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    delta: Tensor<T>,
) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Mutable gradient buffer for `v`, zero-initialized on first use.
pub(crate) fn grad_slot<'a, T: Scalar>(
    tape: &Tape<T>,
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut Tensor<T>> {
    if !tape.nodes[v.0].requires_grad {
        return None;
    }
    let shape = tape.nodes[v.0].value.shape();
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
}
