//! Operation tape and reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so the node list is already topologically
//! sorted and the backward sweep is a single reverse pass over it.

use crate::error::{Error, Result};
use crate::ops::basic;
use crate::ops::conv::{self, ConvRecord};
use crate::ops::interp::{self, InterpRecord};
use crate::ops::loss::{self, SmoothL1Record};
use crate::ops::norm::{self, BatchNormRecord};
use crate::ops::pool::{self, PoolRecord};
use crate::ops::stereo;
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv(ConvRecord),
    Pool(PoolRecord),
    Interp(InterpRecord<T>),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, starts: Vec<usize> },
    Softmax { input: Var, axis: usize },
    BatchNorm(BatchNormRecord<T>),
    CostVolume { left: Var, right: Var },
    Expectation { input: Var, axis: usize },
    SmoothL1(SmoothL1Record<T>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv(r) => {
                let mut v = vec![r.input, r.weight];
                v.extend(r.bias);
                v
            }
            Op::Pool(r) => vec![r.input],
            Op::Interp(r) => vec![r.input],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } | Op::Softmax { input, .. } | Op::Expectation { input, .. } => {
                vec![*input]
            }
            Op::BatchNorm(r) => vec![r.input, r.gamma, r.beta],
            Op::CostVolume { left, right } => vec![*left, *right],
            Op::SmoothL1(r) => vec![r.pred],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv(r) if r.transposed => "deconv",
            Op::Conv(_) => "conv",
            Op::Pool(_) => "avg_pool",
            Op::Interp(_) => "interpolate",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::BatchNorm(_) => "batchnorm",
            Op::CostVolume { .. } => "cost_volume",
            Op::Expectation { .. } => "expectation",
            Op::SmoothL1(_) => "smooth_l1",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
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

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node whose value contains a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaf_grads.push((Var(i), g));
                continue;
            }
            for (v, contribution) in self.backward_node(i, &g) {
                debug_assert_eq!(contribution.shape(), self.shape(v), "{} grad", node.op.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv(r) => {
                let want = [
                    self.wants(r.input),
                    self.wants(r.weight),
                    r.bias.is_some_and(|b| self.wants(b)),
                ];
                let (dx, dw, db) =
                    conv::conv_backward(r, self.value(r.input), self.value(r.weight), g, want);
                out.extend(dx.map(|t| (r.input, t)));
                out.extend(dw.map(|t| (r.weight, t)));
                if let (Some(b), Some(t)) = (r.bias, db) {
                    out.push((b, t));
                }
            }
            Op::Pool(r) => out.push((r.input, pool::backward(r, self.shape(r.input), g))),
            Op::Interp(r) => out.push((r.input, interp::backward(r, self.shape(r.input), g))),
            Op::Relu(a) => out.push((*a, basic::relu_backward(self.value(*a), g))),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, basic::hadamard(g, self.value(*b))));
                }
                if self.wants(*b) {
                    out.push((*b, basic::hadamard(g, self.value(*a))));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.map(|v| v * *k))),
            Op::Sum(a) => out.push((*a, Tensor::full(self.shape(*a).to_vec(), g.item()))),
            Op::Reshape(a) => out.push((*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec()))),
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                for (v, t) in inputs.iter().zip(basic::concat_backward(&shapes, *axis, g)) {
                    if self.wants(*v) {
                        out.push((*v, t));
                    }
                }
            }
            Op::Slice { input, starts } => {
                out.push((*input, basic::slice_backward(self.shape(*input), starts, g)))
            }
            Op::Softmax { input, axis } => {
                out.push((*input, basic::softmax_backward(&node.value, *axis, g)))
            }
            Op::BatchNorm(r) => {
                let (dx, dgamma, dbeta) = norm::backward(r, self.value(r.gamma), g);
                if self.wants(r.input) {
                    out.push((r.input, dx));
                }
                if self.wants(r.gamma) {
                    out.push((r.gamma, dgamma));
                }
                if self.wants(r.beta) {
                    out.push((r.beta, dbeta));
                }
            }
            Op::CostVolume { left, right } => {
                let (dl, dr) = stereo::cost_volume_backward(self.shape(*left), g);
                if self.wants(*left) {
                    out.push((*left, dl));
                }
                if self.wants(*right) {
                    out.push((*right, dr));
                }
            }
            Op::Expectation { input, axis } => {
                out.push((*input, stereo::expectation_backward(self.shape(*input), *axis, g)))
            }
            Op::SmoothL1(r) => out.push((r.pred, loss::smooth_l1_backward(r, self.value(r.pred), g))),
        }
        out
    }
}

/// Gradients of the differentiable leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }

    /// Gradient of a leaf, or zeros of `shape` if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![2], 3.0));
        let c = g.constant(Tensor::full(vec![2], 2.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn shared_inputs_accumulate() {
        // y = x + x + x*x at x = 3 -> dy/dx = 2 + 2x = 8
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let a = g.add(x, x).unwrap();
        let b = g.mul(x, x).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 8.0);
    }
}
