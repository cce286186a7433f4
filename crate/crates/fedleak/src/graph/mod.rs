//! Computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an immutable, topologically ordered list of operation
//! records built through [`GraphBuilder`]. Evaluation state lives in a
//! separate [`Values`] buffer, so one graph can be shared read-only across
//! threads while each differentiation pass keeps private scratch.
//!
//! Differentiation comes in two forms:
//!
//! * numeric ([`Graph::gradients`]) — classic vector-Jacobian accumulation
//!   over evaluated values;
//! * symbolic ([`GraphBuilder::gradient_nodes`]) — the backward pass is
//!   appended to the graph as ordinary nodes, which makes parameter
//!   gradients themselves differentiable. Running the numeric pass over the
//!   extended graph yields second-order quantities such as the gradient of a
//!   gradient-matching objective with respect to a network input.

mod backward;
mod eval;
mod kernels;

pub use eval::Values;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Precision, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Operation kinds. Shapes follow these conventions: scalars are rank 0,
/// dense activations `[batch, units]`, image data `[batch, channels, h, w]`,
/// convolution kernels `[out_c, in_c, kh, kw]`, channel vectors `[channels]`.
#[derive(Debug, Clone)]
pub enum Op {
    /// Named input fed at evaluation time.
    Leaf { name: String },
    /// Tensor baked into the graph.
    Constant(Tensor),
    /// `op(a) . op(b)` matrix product with optional transposes.
    MatMul { ta: bool, tb: bool },
    /// `[b,u] + [u]` broadcast over rows.
    AddBias,
    /// Stride-1 2-D convolution, kernel `[o,i,kh,kw]`.
    Conv2d { padding: Padding },
    /// Gradient of conv w.r.t. its input: `(dy, kernel) -> dx`.
    ConvInputGrad { padding: Padding },
    /// Gradient of conv w.r.t. its kernel: `(x, dy) -> dk`.
    ConvKernelGrad { padding: Padding, kh: usize, kw: usize },
    Relu,
    /// 1 where x > 0 else 0; carries no gradient (a.e. derivative of the mask).
    ReluMask,
    /// 2x2 average pooling, stride 2.
    AvgPool2,
    /// Transpose of [`Op::AvgPool2`].
    AvgUnpool2,
    /// `[b,c,h,w] (+|-|*) [c]`, broadcast over batch and space.
    AddChannel,
    SubChannel,
    MulChannel,
    /// `1 / sqrt(x + eps)` elementwise.
    RsqrtEps { eps: f64 },
    /// Row-wise numerically stable softmax on `[b,k]`.
    Softmax,
    /// `mean_i(logsumexp(z_i) - sum_k p[i,k] z[i,k])` for `(logits, targets)`;
    /// log-sum-exp stabilized, fused for double-backprop stability.
    SoftmaxCrossEntropy,
    Reshape { shape: Vec<usize> },
    /// Same-shape elementwise arithmetic.
    Add,
    Sub,
    Mul,
    /// `x * factor` with a compile-time constant.
    Scale { factor: f64 },
    /// `(x, s)` where `s` is rank-0: `x * s`.
    MulScalar,
    /// Sum of all elements, rank-0 output.
    Sum,
    /// `[b,c,h,w] -> [c]`, summing batch and space.
    ChannelSum,
    /// `[b,u] -> [u]`, summing rows.
    ColSum,
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::AddBias => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
            Op::Relu => "relu",
            Op::ReluMask => "relu_mask",
            Op::AvgPool2 => "avg_pool2",
            Op::AvgUnpool2 => "avg_unpool2",
            Op::AddChannel => "add_channel",
            Op::SubChannel => "sub_channel",
            Op::MulChannel => "mul_channel",
            Op::RsqrtEps { .. } => "rsqrt_eps",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::MulScalar => "mul_scalar",
            Op::Sum => "sum",
            Op::ChannelSum => "channel_sum",
            Op::ColSum => "col_sum",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Mutable graph under construction. Node ids are issued in topological
/// order; inputs must always refer to existing nodes.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    precision: Precision,
}

impl GraphBuilder {
    pub fn new(precision: Precision) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> Result<NodeId> {
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::InvalidGraph(format!(
                    "node {} references unknown input {i}",
                    self.nodes.len()
                )));
            }
        }
        self.nodes.push(Node { op, inputs, shape });
        Ok(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &Op, expected: &[usize], got: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: format!("{} (node {})", op.label(), self.nodes.len()),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Leaf { name: name.into() }, vec![], shape.to_vec())
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), vec![], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let op = Op::MatMul { ta, tb };
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch(&op, &[0, 0], if sa.len() != 2 { sa } else { sb }));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(self.mismatch(&op, &[m, ka], &[kb, n]));
        }
        self.push(op, vec![a, b], vec![m, n])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x).to_vec();
        let sb = self.shape_of(bias);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(self.mismatch(&Op::AddBias, &sx, sb));
        }
        self.push(Op::AddBias, vec![x, bias], sx)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let op = Op::Conv2d { padding };
        let sx = self.shape_of(x).to_vec();
        let sk = self.shape_of(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 {
            return Err(self.mismatch(&op, &sx, &sk));
        }
        let (b, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(self.mismatch(&op, &[c_out, c_in, kh, kw], &sk));
        }
        let (oh, ow) = conv_out_dims(h, w, kh, kw, padding).ok_or_else(|| {
            Error::InvalidGraph(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with {padding:?} padding"
            ))
        })?;
        self.push(op, vec![x, kernel], vec![b, c_out, oh, ow])
    }

    pub fn conv2d_input_grad(
        &mut self,
        dy: NodeId,
        kernel: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let op = Op::ConvInputGrad { padding };
        let sy = self.shape_of(dy).to_vec();
        let sk = self.shape_of(kernel).to_vec();
        if sy.len() != 4 || sk.len() != 4 || sy[1] != sk[0] {
            return Err(self.mismatch(&op, &sy, &sk));
        }
        let (kh, kw) = (sk[2], sk[3]);
        let (h, w) = match padding {
            Padding::Same => (sy[2], sy[3]),
            Padding::Valid => (sy[2] + kh - 1, sy[3] + kw - 1),
        };
        self.push(op, vec![dy, kernel], vec![sy[0], sk[1], h, w])
    }

    pub fn conv2d_kernel_grad(
        &mut self,
        x: NodeId,
        dy: NodeId,
        padding: Padding,
        kh: usize,
        kw: usize,
    ) -> Result<NodeId> {
        let op = Op::ConvKernelGrad { padding, kh, kw };
        let sx = self.shape_of(x).to_vec();
        let sy = self.shape_of(dy).to_vec();
        if sx.len() != 4 || sy.len() != 4 || sx[0] != sy[0] {
            return Err(self.mismatch(&op, &sx, &sy));
        }
        self.push(op, vec![x, dy], vec![sy[1], sx[1], kh, kw])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        self.push(Op::Relu, vec![x], s)
    }

    pub fn relu_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        self.push(Op::ReluMask, vec![x], s)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::InvalidGraph(format!(
                "avg_pool2 needs even spatial dims, got {s:?}"
            )));
        }
        self.push(Op::AvgPool2, vec![x], vec![s[0], s[1], s[2] / 2, s[3] / 2])
    }

    pub fn avg_unpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch(&Op::AvgUnpool2, &[0, 0, 0, 0], &s));
        }
        self.push(
            Op::AvgUnpool2,
            vec![x],
            vec![s[0], s[1], s[2] * 2, s[3] * 2],
        )
    }

    fn channel_op(&mut self, op: Op, x: NodeId, c: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x).to_vec();
        let sc = self.shape_of(c);
        if sx.len() != 4 || sc.len() != 1 || sc[0] != sx[1] {
            return Err(self.mismatch(&op, &sx, sc));
        }
        self.push(op, vec![x, c], sx)
    }

    pub fn add_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_op(Op::AddChannel, x, c)
    }

    pub fn sub_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_op(Op::SubChannel, x, c)
    }

    pub fn mul_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_op(Op::MulChannel, x, c)
    }

    pub fn rsqrt_eps(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        self.push(Op::RsqrtEps { eps }, vec![x], s)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch(&Op::Softmax, &[0, 0], &s));
        }
        self.push(Op::Softmax, vec![x], s)
    }

    /// `targets` holds one probability row per sample (one-hot for hard labels).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let sl = self.shape_of(logits).to_vec();
        let st = self.shape_of(targets);
        if sl.len() != 2 || st != sl.as_slice() {
            return Err(self.mismatch(&Op::SoftmaxCrossEntropy, &sl, st));
        }
        self.push(Op::SoftmaxCrossEntropy, vec![logits, targets], vec![])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if numel(sx) != numel(shape) {
            return Err(self.mismatch(
                &Op::Reshape {
                    shape: shape.to_vec(),
                },
                shape,
                sx,
            ));
        }
        self.push(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![x],
            shape.to_vec(),
        )
    }

    fn binary_same(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(self.mismatch(&op, &sa, sb));
        }
        self.push(op, vec![a, b], sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(Op::Mul, a, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        self.push(Op::Scale { factor }, vec![x], s)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.shape_of(s);
        if !ss.is_empty() {
            return Err(self.mismatch(&Op::MulScalar, &[], ss));
        }
        let sx = self.shape_of(x).to_vec();
        self.push(Op::MulScalar, vec![x, s], sx)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x], vec![])
    }

    pub fn channel_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch(&Op::ChannelSum, &[0, 0, 0, 0], &s));
        }
        self.push(Op::ChannelSum, vec![x], vec![s[1]])
    }

    pub fn col_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch(&Op::ColSum, &[0, 0], &s));
        }
        self.push(Op::ColSum, vec![x], vec![s[1]])
    }

    /// Freeze into an immutable graph with named outputs.
    pub fn finish(self, outputs: Vec<(String, NodeId)>) -> Result<Graph> {
        for (name, id) in &outputs {
            if *id >= self.nodes.len() {
                return Err(Error::InvalidGraph(format!(
                    "output `{name}` references unknown node {id}"
                )));
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            outputs,
            precision: self.precision,
        })
    }
}

pub(crate) fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            // odd kernels only, so the output grid aligns with the input
            if kh % 2 == 1 && kw % 2 == 1 {
                Some((h, w))
            } else {
                None
            }
        }
        Padding::Valid => {
            if h >= kh && w >= kw {
                Some((h - kh + 1, w - kw + 1))
            } else {
                None
            }
        }
    }
}

pub(crate) fn pad_offsets(kh: usize, kw: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    }
}

/// Immutable computation graph. See module docs.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    precision: Precision,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Evaluate all nodes given named leaf feeds, and return the named
    /// outputs. Rejects missing feeds, shape mismatches and non-finite
    /// inputs (masked bundles must be densified before evaluation).
    pub fn forward(&self, feeds: &HashMap<String, Tensor>) -> Result<HashMap<String, Tensor>> {
        let values = self.evaluate(feeds)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values.get(*id).clone()))
            .collect())
    }

}

pub(crate) fn influence_set_nodes(nodes: &[Node], targets: &[NodeId]) -> Vec<bool> {
    let mut reaches = vec![false; nodes.len()];
    for &t in targets {
        reaches[t] = true;
    }
    for (id, node) in nodes.iter().enumerate() {
        if !reaches[id] {
            reaches[id] = node.inputs.iter().any(|&i| reaches[i]);
        }
    }
    reaches
}
