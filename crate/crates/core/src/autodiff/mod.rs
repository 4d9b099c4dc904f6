//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied to it in creation order, which is
//! also a topological order: an op can only consume nodes that already
//! exist. [`Graph::backward`] walks the tape in exact reverse order, so the
//! gradient summation order is fixed and results are bit-reproducible.
//!
//! ```
//! use linvid::autodiff::Graph;
//! use linvid::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
pub mod ops;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub use ops::{
    AddChannelBias, Clamp, Concat, Conv2d, Cosine, Fc, LinComb, MatVec, Mul, Pad2d, Relu,
    Reshape, Slice, Sum, SumSquares,
};

/// A differentiable operation that can be recorded on a [`Graph`].
pub trait Operator: fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product. Returns one entry per input; entries whose
    /// `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;

    /// Distance from the inputs to the nearest point where this op is not
    /// differentiable. `None` for smooth ops.
    fn kink_distance(&self, _inputs: &[&Tensor]) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Option<Box<dyn Operator>>,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| match &n.op {
                Some(op) => op.name(),
                None if n.needs_grad => "param",
                None => "constant",
            }))
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, mut value: Tensor, needs_grad: bool) -> NodeId {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records `op` applied to `inputs`. Non-finite outputs are rejected.
    pub fn apply<O: Operator + 'static>(&mut self, op: O, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Contract(format!(
                    "{}: input node {} does not exist",
                    op.name(),
                    id.0
                )));
            }
        }
        let mut value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            op.forward(&vals)?
        };
        self.precision.round_slice(value.data_mut());
        value.check_finite(op.name(), "output")?;
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            inputs: inputs.to_vec(),
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter. Nodes with several consumers accumulate by
    /// summation in reverse tape order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (true, Some(mut g)) = (*need, g) else { continue };
                self.precision.round_slice(g.data_mut());
                g.check_finite(op.name(), "gradient")?;
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Smallest distance of any recorded op's inputs to a kink (relu at 0,
    /// clamp bounds, interpolation cell edges). `f64::INFINITY` when the
    /// graph is smooth.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| {
                let op = n.op.as_ref()?;
                let vals: Vec<&Tensor> = n.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                op.kink_distance(&vals)
            })
            .fold(f64::INFINITY, f64::min)
    }

    // Convenience wrappers for the built-in ops.

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, padding: usize) -> Result<NodeId> {
        self.apply(Conv2d { padding }, &[input, kernels])
    }

    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(AddChannelBias, &[input, bias])
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Relu, &[input])
    }

    pub fn fc(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Fc, &[input, weights, bias])
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        self.apply(MatVec, &[matrix, vector])
    }

    pub fn lincomb(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let coeffs = terms.iter().map(|t| t.0).collect();
        let ids: Vec<NodeId> = terms.iter().map(|t| t.1).collect();
        self.apply(LinComb { coeffs }, &ids)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.lincomb(&[(1.0, a), (1.0, b)])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.lincomb(&[(1.0, a), (-1.0, b)])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.lincomb(&[(c, a)])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Mul, &[a, b])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Sum, &[a])
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(SumSquares, &[a])
    }

    pub fn pad2d(&mut self, a: NodeId, pad: usize) -> Result<NodeId> {
        self.apply(Pad2d { pad }, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if self.value(a).shape() == [n] {
            return Ok(a);
        }
        self.reshape(a, &[n])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Concat, parts)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Slice { start, len }, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Clamp { lo, hi }, &[a])
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Cosine { eps }, &[a, b])
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss or needs no grad.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros shaped like `like` when the node does not
    /// reach the loss.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
