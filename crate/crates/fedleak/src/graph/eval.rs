use std::collections::HashMap;

use super::{kernels, Graph, Node, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Per-evaluation scratch: one value slot per node.
#[derive(Debug, Clone)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id]
    }
}

impl Graph {
    /// Evaluate every node in topological order.
    pub fn evaluate(&self, feeds: &HashMap<String, Tensor>) -> Result<Values> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes().len());
        for (id, node) in self.nodes().iter().enumerate() {
            let v = self.eval_node(id, node, &vals, feeds)?;
            vals.push(v);
        }
        Ok(Values { vals })
    }

    fn eval_node(
        &self,
        id: NodeId,
        node: &Node,
        vals: &[Tensor],
        feeds: &HashMap<String, Tensor>,
    ) -> Result<Tensor> {
        let shape = &node.shape;
        let input = |k: usize| -> &Tensor { &vals[node.inputs[k]] };
        let mut out = match &node.op {
            Op::Leaf { name } => {
                let t = feeds
                    .get(name)
                    .ok_or_else(|| Error::MissingFeed(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("feed `{name}` (node {id})"),
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                if !t.is_finite() {
                    return Err(Error::NonFiniteInput {
                        context: format!("feed `{name}`"),
                    });
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::MatMul { ta, tb } => {
                let (a, b) = (input(0), input(1));
                let sa = a.shape();
                let sb = b.shape();
                let mut out = Tensor::zeros(shape);
                kernels::matmul(
                    a.data(),
                    (sa[0], sa[1]),
                    *ta,
                    b.data(),
                    (sb[0], sb[1]),
                    *tb,
                    out.data_mut(),
                );
                out
            }
            Op::AddBias => {
                let (x, b) = (input(0), input(1));
                let n = b.len();
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(n) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Conv2d { padding } => {
                let (x, k) = (input(0), input(1));
                let sx = x.shape();
                let sk = k.shape();
                let mut out = Tensor::zeros(shape);
                kernels::conv2d(
                    x.data(),
                    (sx[0], sx[1], sx[2], sx[3]),
                    k.data(),
                    (sk[0], sk[2], sk[3]),
                    *padding,
                    (shape[2], shape[3]),
                    out.data_mut(),
                );
                out
            }
            Op::ConvInputGrad { padding } => {
                let (dy, k) = (input(0), input(1));
                let sy = dy.shape();
                let sk = k.shape();
                let mut out = Tensor::zeros(shape);
                kernels::conv2d_input_grad(
                    dy.data(),
                    (sy[0], sy[1], sy[2], sy[3]),
                    k.data(),
                    (sk[1], sk[2], sk[3]),
                    *padding,
                    (shape[2], shape[3]),
                    out.data_mut(),
                );
                out
            }
            Op::ConvKernelGrad { padding, kh, kw } => {
                let (x, dy) = (input(0), input(1));
                let sx = x.shape();
                let sy = dy.shape();
                let mut out = Tensor::zeros(shape);
                kernels::conv2d_kernel_grad(
                    x.data(),
                    (sx[0], sx[1], sx[2], sx[3]),
                    dy.data(),
                    (sy[1], sy[2], sy[3]),
                    *padding,
                    (*kh, *kw),
                    out.data_mut(),
                );
                out
            }
            Op::Relu => {
                let mut out = input(0).clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            Op::ReluMask => {
                let x = input(0);
                let data = x.data().iter().map(|&v| f64::from(v > 0.0)).collect();
                Tensor::from_vec(shape, data)?
            }
            Op::AvgPool2 => {
                let x = input(0);
                let sx = x.shape();
                let mut out = Tensor::zeros(shape);
                kernels::avg_pool2(x.data(), (sx[0] * sx[1], sx[2], sx[3]), out.data_mut());
                out
            }
            Op::AvgUnpool2 => {
                let x = input(0);
                let sx = x.shape();
                let mut out = Tensor::zeros(shape);
                kernels::avg_unpool2(x.data(), (sx[0] * sx[1], sx[2], sx[3]), out.data_mut());
                out
            }
            Op::AddChannel | Op::SubChannel | Op::MulChannel => {
                let (x, c) = (input(0), input(1));
                let sx = x.shape();
                let hw = sx[2] * sx[3];
                let channels = sx[1];
                let mut out = x.clone();
                let cd = c.data();
                for (p, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
                    let cv = cd[p % channels];
                    match node.op {
                        Op::AddChannel => plane.iter_mut().for_each(|v| *v += cv),
                        Op::SubChannel => plane.iter_mut().for_each(|v| *v -= cv),
                        Op::MulChannel => plane.iter_mut().for_each(|v| *v *= cv),
                        _ => unreachable!(),
                    }
                }
                out
            }
            Op::RsqrtEps { eps } => {
                let mut out = input(0).clone();
                for v in out.data_mut() {
                    *v = 1.0 / (*v + eps).sqrt();
                }
                out
            }
            Op::Softmax => {
                let x = input(0);
                let mut out = Tensor::zeros(shape);
                kernels::softmax(x.data(), shape[0], shape[1], out.data_mut());
                out
            }
            Op::SoftmaxCrossEntropy => {
                let (z, t) = (input(0), input(1));
                let sz = z.shape();
                Tensor::scalar(kernels::softmax_cross_entropy(
                    z.data(),
                    t.data(),
                    sz[0],
                    sz[1],
                ))
            }
            Op::Reshape { shape } => input(0).reshaped(shape)?,
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let mut out = a.clone();
                let od = out.data_mut();
                let bd = b.data();
                match node.op {
                    Op::Add => od.iter_mut().zip(bd).for_each(|(o, &v)| *o += v),
                    Op::Sub => od.iter_mut().zip(bd).for_each(|(o, &v)| *o -= v),
                    Op::Mul => od.iter_mut().zip(bd).for_each(|(o, &v)| *o *= v),
                    _ => unreachable!(),
                }
                out
            }
            Op::Scale { factor } => {
                let mut out = input(0).clone();
                for v in out.data_mut() {
                    *v *= factor;
                }
                out
            }
            Op::MulScalar => {
                let s = input(1).item();
                let mut out = input(0).clone();
                for v in out.data_mut() {
                    *v *= s;
                }
                out
            }
            Op::Sum => Tensor::scalar(input(0).data().iter().sum()),
            Op::ChannelSum => {
                let x = input(0);
                let sx = x.shape();
                let (channels, hw) = (sx[1], sx[2] * sx[3]);
                let mut out = Tensor::zeros(shape);
                let od = out.data_mut();
                for (p, plane) in x.data().chunks_exact(hw).enumerate() {
                    od[p % channels] += plane.iter().sum::<f64>();
                }
                out
            }
            Op::ColSum => {
                let x = input(0);
                let n = x.shape()[1];
                let mut out = Tensor::zeros(shape);
                let od = out.data_mut();
                for row in x.data().chunks_exact(n) {
                    for (o, &v) in od.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
        };
        debug_assert_eq!(numel(shape), out.len(), "node {id} shape/value mismatch");
        self.precision().quantize_slice(out.data_mut());
        Ok(out)
    }
}
