//! Reverse-mode passes.
//!
//! The numeric pass walks evaluated values and accumulates vector-Jacobian
//! products into per-node adjoint buffers. The symbolic pass appends the
//! same chain rule as new graph nodes, so emitted gradients stay
//! differentiable; only operations that occur on a forward model path need a
//! symbolic rule, while every operation (including emitted ones) has a
//! numeric rule.

use super::{influence_set_nodes, kernels, Graph, GraphBuilder, NodeId, Op, Values};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// d(root)/d(wrt) for a scalar root. Leaves without influence yield zero
    /// tensors of their own shape.
    pub fn gradients(&self, values: &Values, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if root >= self.nodes().len() {
            return Err(Error::InvalidGraph(format!("root node {root} not in graph")));
        }
        for &w in wrt {
            if w >= self.nodes().len() {
                return Err(Error::InvalidGraph(format!("wrt node {w} not in graph")));
            }
        }
        if !self.node(root).shape.is_empty() {
            return Err(Error::InvalidGraph(format!(
                "gradient root must be scalar, node {root} has shape {:?}",
                self.node(root).shape
            )));
        }
        let reaches = influence_set_nodes(self.nodes(), wrt);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes().len()];
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            if adj[id].is_none() || !reaches[id] {
                continue;
            }
            let upstream = adj[id].take().unwrap();
            self.backprop_node(id, &upstream, values, &reaches, &mut adj);
            if wrt.contains(&id) {
                adj[id] = Some(upstream); // keep for readout
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| {
                let shape = &self.node(w).shape;
                match &adj[w] {
                    Some(g) => Tensor::from_vec(shape, g.clone()).expect("adjoint shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backprop_node(
        &self,
        id: NodeId,
        u: &[f64],
        values: &Values,
        reaches: &[bool],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let node = self.node(id);
        let quantize = self.precision();
        let accumulate = |adj: &mut [Option<Vec<f64>>], input: NodeId, mut g: Vec<f64>| {
            if !reaches[input] {
                return;
            }
            quantize.quantize_slice(&mut g);
            match &mut adj[input] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                    quantize.quantize_slice(adj[input].as_mut().unwrap());
                }
                slot @ None => *slot = Some(g),
            }
        };
        let val = |k: usize| values.get(node.inputs[k]);
        let want = |k: usize| reaches[node.inputs[k]];

        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) | Op::ReluMask => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (val(0), val(1));
                let (sa, sb) = (a.shape(), b.shape());
                let su = &node.shape;
                if want(0) {
                    let mut g = vec![0.0; a.len()];
                    match (ta, tb) {
                        (false, false) => kernels::matmul(u, (su[0], su[1]), false, b.data(), (sb[0], sb[1]), true, &mut g),
                        (true, false) => kernels::matmul(b.data(), (sb[0], sb[1]), false, u, (su[0], su[1]), true, &mut g),
                        (false, true) => kernels::matmul(u, (su[0], su[1]), false, b.data(), (sb[0], sb[1]), false, &mut g),
                        (true, true) => kernels::matmul(b.data(), (sb[0], sb[1]), true, u, (su[0], su[1]), true, &mut g),
                    }
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let mut g = vec![0.0; b.len()];
                    match (ta, tb) {
                        (false, false) => kernels::matmul(a.data(), (sa[0], sa[1]), true, u, (su[0], su[1]), false, &mut g),
                        (true, false) => kernels::matmul(a.data(), (sa[0], sa[1]), false, u, (su[0], su[1]), false, &mut g),
                        (false, true) => kernels::matmul(u, (su[0], su[1]), true, a.data(), (sa[0], sa[1]), false, &mut g),
                        (true, true) => kernels::matmul(u, (su[0], su[1]), true, a.data(), (sa[0], sa[1]), true, &mut g),
                    }
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::AddBias => {
                if want(0) {
                    accumulate(adj, node.inputs[0], u.to_vec());
                }
                if want(1) {
                    let n = val(1).len();
                    let mut g = vec![0.0; n];
                    for row in u.chunks_exact(n) {
                        for (gv, &uv) in g.iter_mut().zip(row) {
                            *gv += uv;
                        }
                    }
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::Conv2d { padding } => {
                let (x, k) = (val(0), val(1));
                let (sx, sk, sy) = (x.shape(), k.shape(), &node.shape);
                if want(0) {
                    let mut g = vec![0.0; x.len()];
                    kernels::conv2d_input_grad(
                        u,
                        (sy[0], sy[1], sy[2], sy[3]),
                        k.data(),
                        (sk[1], sk[2], sk[3]),
                        *padding,
                        (sx[2], sx[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let mut g = vec![0.0; k.len()];
                    kernels::conv2d_kernel_grad(
                        x.data(),
                        (sx[0], sx[1], sx[2], sx[3]),
                        u,
                        (sy[1], sy[2], sy[3]),
                        *padding,
                        (sk[2], sk[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::ConvInputGrad { padding } => {
                // node = A_k^T dy; bilinear in (dy, kernel)
                let (dy, k) = (val(0), val(1));
                let (sy, sk, sx) = (dy.shape(), k.shape(), &node.shape);
                if want(0) {
                    let mut g = vec![0.0; dy.len()];
                    kernels::conv2d(
                        u,
                        (sx[0], sx[1], sx[2], sx[3]),
                        k.data(),
                        (sk[0], sk[2], sk[3]),
                        *padding,
                        (sy[2], sy[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let mut g = vec![0.0; k.len()];
                    kernels::conv2d_kernel_grad(
                        u,
                        (sx[0], sx[1], sx[2], sx[3]),
                        dy.data(),
                        (sy[1], sy[2], sy[3]),
                        *padding,
                        (sk[2], sk[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::ConvKernelGrad { padding, .. } => {
                // node = B_x^T dy; bilinear in (x, dy)
                let (x, dy) = (val(0), val(1));
                let (sx, sy) = (x.shape(), dy.shape());
                if want(0) {
                    let mut g = vec![0.0; x.len()];
                    kernels::conv2d_input_grad(
                        dy.data(),
                        (sy[0], sy[1], sy[2], sy[3]),
                        u,
                        (sx[1], node.shape[2], node.shape[3]),
                        *padding,
                        (sx[2], sx[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let mut g = vec![0.0; dy.len()];
                    kernels::conv2d(
                        x.data(),
                        (sx[0], sx[1], sx[2], sx[3]),
                        u,
                        (sy[1], node.shape[2], node.shape[3]),
                        *padding,
                        (sy[2], sy[3]),
                        &mut g,
                    );
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::Relu => {
                if want(0) {
                    let x = val(0);
                    let g = u
                        .iter()
                        .zip(x.data())
                        .map(|(&uv, &xv)| if xv > 0.0 { uv } else { 0.0 })
                        .collect();
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::AvgPool2 => {
                if want(0) {
                    let sx = val(0).shape();
                    let mut g = vec![0.0; val(0).len()];
                    kernels::avg_unpool2(u, (sx[0] * sx[1], sx[2] / 2, sx[3] / 2), &mut g);
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::AvgUnpool2 => {
                if want(0) {
                    let sx = val(0).shape();
                    let mut g = vec![0.0; val(0).len()];
                    kernels::avg_pool2(u, (sx[0] * sx[1], sx[2] * 2, sx[3] * 2), &mut g);
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::AddChannel | Op::SubChannel => {
                let sign = if matches!(node.op, Op::AddChannel) { 1.0 } else { -1.0 };
                if want(0) {
                    accumulate(adj, node.inputs[0], u.to_vec());
                }
                if want(1) {
                    let sx = &node.shape;
                    let (channels, hw) = (sx[1], sx[2] * sx[3]);
                    let mut g = vec![0.0; channels];
                    for (p, plane) in u.chunks_exact(hw).enumerate() {
                        g[p % channels] += sign * plane.iter().sum::<f64>();
                    }
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::MulChannel => {
                let sx = &node.shape;
                let (channels, hw) = (sx[1], sx[2] * sx[3]);
                if want(0) {
                    let c = val(1).data();
                    let mut g = u.to_vec();
                    for (p, plane) in g.chunks_exact_mut(hw).enumerate() {
                        let cv = c[p % channels];
                        plane.iter_mut().for_each(|v| *v *= cv);
                    }
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let x = val(0).data();
                    let mut g = vec![0.0; channels];
                    for (p, plane) in u.chunks_exact(hw).enumerate() {
                        let xplane = &x[p * hw..(p + 1) * hw];
                        let mut acc = 0.0;
                        for (&uv, &xv) in plane.iter().zip(xplane) {
                            acc += uv * xv;
                        }
                        g[p % channels] += acc;
                    }
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::RsqrtEps { eps } => {
                if want(0) {
                    let x = val(0);
                    let g = u
                        .iter()
                        .zip(x.data())
                        .map(|(&uv, &xv)| {
                            let t = xv + eps;
                            -0.5 * uv / (t * t.sqrt())
                        })
                        .collect();
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::Softmax => {
                if want(0) {
                    let s = values.get(id);
                    let cols = node.shape[1];
                    let mut g = vec![0.0; s.len()];
                    for ((grow, urow), srow) in g
                        .chunks_exact_mut(cols)
                        .zip(u.chunks_exact(cols))
                        .zip(s.data().chunks_exact(cols))
                    {
                        let dot: f64 = urow.iter().zip(srow).map(|(a, b)| a * b).sum();
                        for ((gv, &uv), &sv) in grow.iter_mut().zip(urow).zip(srow) {
                            *gv = sv * (uv - dot);
                        }
                    }
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::SoftmaxCrossEntropy => {
                let (z, t) = (val(0), val(1));
                let (rows, cols) = (z.shape()[0], z.shape()[1]);
                let scale = u[0] / rows as f64;
                if want(0) {
                    let mut s = vec![0.0; z.len()];
                    kernels::softmax(z.data(), rows, cols, &mut s);
                    for (sv, &tv) in s.iter_mut().zip(t.data()) {
                        *sv = (*sv - tv) * scale;
                    }
                    accumulate(adj, node.inputs[0], s);
                }
                if want(1) {
                    let g = z.data().iter().map(|&zv| -zv * scale).collect();
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::Reshape { .. } => {
                if want(0) {
                    accumulate(adj, node.inputs[0], u.to_vec());
                }
            }
            Op::Add | Op::Sub => {
                if want(0) {
                    accumulate(adj, node.inputs[0], u.to_vec());
                }
                if want(1) {
                    let g = if matches!(node.op, Op::Add) {
                        u.to_vec()
                    } else {
                        u.iter().map(|v| -v).collect()
                    };
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::Mul => {
                if want(0) {
                    let b = val(1);
                    let g = u.iter().zip(b.data()).map(|(a, b)| a * b).collect();
                    accumulate(adj, node.inputs[0], g);
                }
                if want(1) {
                    let a = val(0);
                    let g = u.iter().zip(a.data()).map(|(u, a)| u * a).collect();
                    accumulate(adj, node.inputs[1], g);
                }
            }
            Op::Scale { factor } => {
                if want(0) {
                    accumulate(adj, node.inputs[0], u.iter().map(|v| v * factor).collect());
                }
            }
            Op::MulScalar => {
                if want(0) {
                    let s = val(1).item();
                    accumulate(adj, node.inputs[0], u.iter().map(|v| v * s).collect());
                }
                if want(1) {
                    let x = val(0);
                    let dot: f64 = u.iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    accumulate(adj, node.inputs[1], vec![dot]);
                }
            }
            Op::Sum => {
                if want(0) {
                    accumulate(adj, node.inputs[0], vec![u[0]; val(0).len()]);
                }
            }
            Op::ChannelSum => {
                if want(0) {
                    let sx = val(0).shape();
                    let (channels, hw) = (sx[1], sx[2] * sx[3]);
                    let mut g = vec![0.0; val(0).len()];
                    for (p, plane) in g.chunks_exact_mut(hw).enumerate() {
                        let uv = u[p % channels];
                        plane.iter_mut().for_each(|v| *v = uv);
                    }
                    accumulate(adj, node.inputs[0], g);
                }
            }
            Op::ColSum => {
                if want(0) {
                    let n = node.shape[0];
                    let mut g = vec![0.0; val(0).len()];
                    for row in g.chunks_exact_mut(n) {
                        row.copy_from_slice(u);
                    }
                    accumulate(adj, node.inputs[0], g);
                }
            }
        }
    }
}

impl GraphBuilder {
    /// Append the backward pass of a scalar `root` as graph nodes and return
    /// one gradient node per `wrt` entry (a zero constant when the leaf has
    /// no influence). The emitted nodes evaluate to d(root)/d(wrt) and remain
    /// differentiable by the numeric pass, which is what enables
    /// gradient-of-gradient objectives.
    pub fn gradient_nodes(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if root >= self.len() {
            return Err(Error::InvalidGraph(format!("root node {root} not in graph")));
        }
        if !self.node(root).shape.is_empty() {
            return Err(Error::InvalidGraph(format!(
                "gradient root must be scalar, node {root} has shape {:?}",
                self.node(root).shape
            )));
        }
        for &w in wrt {
            if w >= self.len() {
                return Err(Error::InvalidGraph(format!("wrt node {w} not in graph")));
            }
        }
        let nodes_len = self.len();
        let reaches = {
            let mut reaches = vec![false; nodes_len];
            for &t in wrt {
                reaches[t] = true;
            }
            for id in 0..nodes_len {
                if !reaches[id] {
                    reaches[id] = self.node(id).inputs.iter().any(|&i| reaches[i]);
                }
            }
            reaches
        };

        let mut adj: Vec<Option<NodeId>> = vec![None; nodes_len];
        adj[root] = Some(self.constant(Tensor::scalar(1.0))?);

        for id in (0..=root).rev() {
            let Some(upstream) = adj[id] else { continue };
            if !reaches[id] {
                continue;
            }
            self.emit_vjp(id, upstream, &reaches, &mut adj)?;
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj[w] {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&self.node(w).shape.clone()))?,
            };
            out.push(g);
        }
        Ok(out)
    }

    fn accumulate_sym(
        &mut self,
        adj: &mut [Option<NodeId>],
        reaches: &[bool],
        input: NodeId,
        g: NodeId,
    ) -> Result<()> {
        if input < adj.len() && reaches[input] {
            adj[input] = Some(match adj[input] {
                Some(prev) => self.add(prev, g)?,
                None => g,
            });
        }
        Ok(())
    }

    fn emit_vjp(
        &mut self,
        id: NodeId,
        u: NodeId,
        reaches: &[bool],
        adj: &mut [Option<NodeId>],
    ) -> Result<()> {
        let node = self.node(id).clone();
        let want = |k: usize| reaches[node.inputs[k]];
        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) | Op::ReluMask => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if want(0) {
                    let g = match (ta, tb) {
                        (false, false) => self.matmul(u, b, false, true)?,
                        (true, false) => self.matmul(b, u, false, true)?,
                        (false, true) => self.matmul(u, b, false, false)?,
                        (true, true) => self.matmul(b, u, true, true)?,
                    };
                    self.accumulate_sym(adj, reaches, a, g)?;
                }
                if want(1) {
                    let g = match (ta, tb) {
                        (false, false) => self.matmul(a, u, true, false)?,
                        (true, false) => self.matmul(a, u, false, false)?,
                        (false, true) => self.matmul(u, a, true, false)?,
                        (true, true) => self.matmul(u, a, true, true)?,
                    };
                    self.accumulate_sym(adj, reaches, b, g)?;
                }
            }
            Op::AddBias => {
                if want(0) {
                    self.accumulate_sym(adj, reaches, node.inputs[0], u)?;
                }
                if want(1) {
                    let g = self.col_sum(u)?;
                    self.accumulate_sym(adj, reaches, node.inputs[1], g)?;
                }
            }
            Op::Conv2d { padding } => {
                let (x, k) = (node.inputs[0], node.inputs[1]);
                let padding = *padding;
                if want(0) {
                    let g = self.conv2d_input_grad(u, k, padding)?;
                    self.accumulate_sym(adj, reaches, x, g)?;
                }
                if want(1) {
                    let (kh, kw) = {
                        let sk = self.shape_of(k);
                        (sk[2], sk[3])
                    };
                    let g = self.conv2d_kernel_grad(x, u, padding, kh, kw)?;
                    self.accumulate_sym(adj, reaches, k, g)?;
                }
            }
            Op::Relu => {
                if want(0) {
                    let m = self.relu_mask(node.inputs[0])?;
                    let g = self.mul(u, m)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::AvgPool2 => {
                if want(0) {
                    let g = self.avg_unpool2(u)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::AddChannel | Op::SubChannel => {
                let negate = matches!(node.op, Op::SubChannel);
                if want(0) {
                    self.accumulate_sym(adj, reaches, node.inputs[0], u)?;
                }
                if want(1) {
                    let mut g = self.channel_sum(u)?;
                    if negate {
                        g = self.scale(g, -1.0)?;
                    }
                    self.accumulate_sym(adj, reaches, node.inputs[1], g)?;
                }
            }
            Op::MulChannel => {
                let (x, c) = (node.inputs[0], node.inputs[1]);
                if want(0) {
                    let g = self.mul_channel(u, c)?;
                    self.accumulate_sym(adj, reaches, x, g)?;
                }
                if want(1) {
                    let prod = self.mul(u, x)?;
                    let g = self.channel_sum(prod)?;
                    self.accumulate_sym(adj, reaches, c, g)?;
                }
            }
            Op::SoftmaxCrossEntropy => {
                let (z, t) = (node.inputs[0], node.inputs[1]);
                let rows = self.shape_of(z)[0] as f64;
                if want(0) {
                    let s = self.softmax(z)?;
                    let diff = self.sub(s, t)?;
                    let scaled = self.scale(diff, 1.0 / rows)?;
                    let g = self.mul_scalar(scaled, u)?;
                    self.accumulate_sym(adj, reaches, z, g)?;
                }
                if want(1) {
                    let scaled = self.scale(z, -1.0 / rows)?;
                    let g = self.mul_scalar(scaled, u)?;
                    self.accumulate_sym(adj, reaches, t, g)?;
                }
            }
            Op::Reshape { .. } => {
                if want(0) {
                    let orig = self.shape_of(node.inputs[0]).to_vec();
                    let g = self.reshape(u, &orig)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::Add | Op::Sub => {
                let negate = matches!(node.op, Op::Sub);
                if want(0) {
                    self.accumulate_sym(adj, reaches, node.inputs[0], u)?;
                }
                if want(1) {
                    let g = if negate { self.scale(u, -1.0)? } else { u };
                    self.accumulate_sym(adj, reaches, node.inputs[1], g)?;
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if want(0) {
                    let g = self.mul(u, b)?;
                    self.accumulate_sym(adj, reaches, a, g)?;
                }
                if want(1) {
                    let g = self.mul(u, a)?;
                    self.accumulate_sym(adj, reaches, b, g)?;
                }
            }
            Op::Scale { factor } => {
                if want(0) {
                    let g = self.scale(u, *factor)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::MulScalar => {
                let (x, s) = (node.inputs[0], node.inputs[1]);
                if want(0) {
                    let g = self.mul_scalar(u, s)?;
                    self.accumulate_sym(adj, reaches, x, g)?;
                }
                if want(1) {
                    let prod = self.mul(u, x)?;
                    let g = self.sum(prod)?;
                    self.accumulate_sym(adj, reaches, s, g)?;
                }
            }
            Op::Sum => {
                if want(0) {
                    let shape = self.shape_of(node.inputs[0]).to_vec();
                    let ones = self.constant(Tensor::filled(&shape, 1.0))?;
                    let g = self.mul_scalar(ones, u)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::ColSum => {
                if want(0) {
                    let shape = self.shape_of(node.inputs[0]).to_vec();
                    let zeros = self.constant(Tensor::zeros(&shape))?;
                    let g = self.add_bias(zeros, u)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            Op::ChannelSum => {
                if want(0) {
                    let shape = self.shape_of(node.inputs[0]).to_vec();
                    let zeros = self.constant(Tensor::zeros(&shape))?;
                    let g = self.add_channel(zeros, u)?;
                    self.accumulate_sym(adj, reaches, node.inputs[0], g)?;
                }
            }
            op @ (Op::ConvInputGrad { .. }
            | Op::ConvKernelGrad { .. }
            | Op::AvgUnpool2
            | Op::Softmax
            | Op::RsqrtEps { .. }) => {
                return Err(Error::InvalidGraph(format!(
                    "symbolic differentiation through `{}` is not supported; \
                     it only appears in already-differentiated graphs",
                    op.label()
                )));
            }
        }
        Ok(())
    }
}
