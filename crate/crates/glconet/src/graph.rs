//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as an append-only node (op kind +
//! input ids); [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients of identical shape to each node's value. Node values are
//! immutable once created, so backward rules read saved activations straight
//! from the tape.
//!
//! In strict mode (the default, used for verification and inference) any
//! non-finite value produced by a primitive is surfaced as a contract error;
//! relaxed mode (training) records the event and keeps going.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// out = scale * x + shift, elementwise with scalar constants; only the
    /// scale matters for the backward rule.
    Affine { x: NodeId, scale: f64 },
    /// gate is [b,1,h,w]; multiplies every channel of x.
    MulBcastCh { gate: NodeId, x: NodeId },
    Matmul(NodeId, NodeId),
    Transpose2(NodeId),
    Reshape(NodeId),
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Softmax { x: NodeId, axis: usize },
    Sigmoid(NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, offset: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    AvgPool { x: NodeId, k: usize },
    PixelShuffle { x: NodeId, r: usize },
    PixelUnshuffle { x: NodeId, r: usize },
    UpsampleBilinear { x: NodeId },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Weighted BCE on logits against constant target/weight maps.
    WeightedBce { logits: NodeId, target: Tensor, weight: Tensor },
    /// Weighted IoU on an already-sigmoid prediction.
    WeightedIou { p: NodeId, target: Tensor, weight: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
    strict: bool,
    nonfinite: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: Vec::new(), strict: true, nonfinite: None }
    }

    /// Relaxed graph for training: non-finite primitives are recorded in
    /// [`Graph::nonfinite_op`] instead of erroring.
    pub fn relaxed() -> Self {
        Graph { strict: false, ..Graph::new() }
    }

    pub fn nonfinite_op(&self) -> Option<&'static str> {
        self.nonfinite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    /// Parameter leaves registered so far, in registration order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    /// Gradients of every registered parameter after [`Graph::backward`];
    /// parameters the loss never reached get zeros.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = match &self.grads[*id] {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(self.nodes[*id].value.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op) -> Result<NodeId> {
        if !value.all_finite() {
            if self.strict {
                return Err(Error::contract(op, "produced a non-finite value"));
            }
            self.nonfinite.get_or_insert(op);
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: kind });
        self.grads.push(None);
        Ok(id)
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf });
        self.grads.push(None);
        id
    }

    /// Named parameter leaf; the same name maps to the same node within one
    /// graph so gradients accumulate across reuse.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some((_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return *id;
        }
        let id = self.leaf(value.clone());
        self.params.push((name.to_string(), id));
        id
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.nodes[a].value.shape(), self.nodes[b].value.shape()),
            ));
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("add", a, b)?;
        let mut v = self.nodes[a].value.clone();
        v.add_scaled(&self.nodes[b].value, 1.0);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("sub", a, b)?;
        let mut v = self.nodes[a].value.clone();
        v.add_scaled(&self.nodes[b].value, -1.0);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("mul", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|t| scale * t + shift);
        self.push("affine", v, Op::Affine { x, scale })
    }

    /// Broadcast a 1-channel gate across all channels of x.
    pub fn mul_bcast_ch(&mut self, gate: NodeId, x: NodeId) -> Result<NodeId> {
        let (gb, gc, gh, gw) = self.nodes[gate].value.dims4()?;
        let (xb, xc, xh, xw) = self.nodes[x].value.dims4()?;
        if gc != 1 || gb != xb || gh != xh || gw != xw {
            return Err(Error::dim(
                "mul_bcast_ch",
                format!("gate {:?} incompatible with {:?}", self.nodes[gate].value.shape(), self.nodes[x].value.shape()),
            ));
        }
        let plane = xh * xw;
        let gv = self.nodes[gate].value.data();
        let xv = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[xb, xc, xh, xw]);
        let ov = out.data_mut();
        for bi in 0..xb {
            let grow = &gv[bi * plane..(bi + 1) * plane];
            for ci in 0..xc {
                let base = (bi * xc + ci) * plane;
                for p in 0..plane {
                    ov[base + p] = grow[p] * xv[base + p];
                }
            }
        }
        self.push("mul_bcast_ch", out, Op::MulBcastCh { gate, x })
    }

    // ── Linear algebra & shape ───────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.nodes[a].value.dims2()?;
        let (kb, n) = self.nodes[b].value.dims2()?;
        if ka != kb {
            return Err(Error::dim("matmul", format!("inner extents {ka} vs {kb}")));
        }
        let data = kernels::matmul(self.nodes[a].value.data(), self.nodes[b].value.data(), m, ka, n);
        self.push("matmul", Tensor::new(vec![m, n], data)?, Op::Matmul(a, b))
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let data = kernels::transpose(self.nodes[x].value.data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose2(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[x].value.reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Concatenate along `axis` (0 or 1 of a rank-4 tensor); all other
    /// extents must agree exactly.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        if xs.len() == 1 {
            // Degenerate concat; still record a pass-through reshape node so
            // wiring stays uniform.
            let shape = self.nodes[xs[0]].value.shape().to_vec();
            return self.reshape(xs[0], shape);
        }
        let first = self.nodes[xs[0]].value.shape().to_vec();
        if axis >= first.len() || first.len() != 4 {
            return Err(Error::dim("concat", format!("axis {axis} on shape {first:?}")));
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.nodes[x].value.shape();
            if s.len() != first.len() {
                return Err(Error::dim("concat", "rank mismatch"));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::dim("concat", format!("extent mismatch on axis {d}: {a} vs {b}")));
                }
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        // Outer = product of extents before axis, inner = product after.
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        let total_inner = total * inner;
        {
            let ov = out.data_mut();
            let mut off = 0usize;
            for &x in xs {
                let s = self.nodes[x].value.shape();
                let len = s[axis] * inner;
                let xv = self.nodes[x].value.data();
                for o in 0..outer {
                    ov[o * total_inner + off..o * total_inner + off + len]
                        .copy_from_slice(&xv[o * len..(o + 1) * len]);
                }
                off += len;
            }
        }
        self.push("concat", out, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Slice `len` extents starting at `start` along `axis` of a rank-4 tensor.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 4 || axis >= 4 || start + len > shape[axis] {
            return Err(Error::dim("slice", format!("[{start}..{}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_span = shape[axis] * inner;
        let dst_span = len * inner;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        {
            let xv = self.nodes[x].value.data();
            let ov = out.data_mut();
            for o in 0..outer {
                let src = o * src_span + start * inner;
                ov[o * dst_span..(o + 1) * dst_span].copy_from_slice(&xv[src..src + dst_span]);
            }
        }
        self.push("slice", out, Op::Slice { x, axis, start })
    }

    // ── Nonlinearities & normalization ───────────────────────────────

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[x].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} on shape {shape:?}")));
        }
        let ext = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&shape);
        let ov = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * ext * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..ext {
                    mx = mx.max(xv[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..ext {
                    let e = (xv[at(j)] - mx).exp();
                    ov[at(j)] = e;
                    sum += e;
                }
                for j in 0..ext {
                    ov[at(j)] /= sum;
                }
            }
        }
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(kernels::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(kernels::gelu);
        self.push("gelu", v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> Result<NodeId> {
        let v = kernels::layer_norm_forward(&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[offset].value)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gain, offset })
    }

    // ── Convolution family ───────────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: &ConvSpec) -> Result<NodeId> {
        let v = kernels::conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            b.map(|id| &self.nodes[id].value),
            spec,
        )?;
        self.push("conv2d", v, Op::Conv2d { x, w, b, spec: *spec })
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = kernels::avg_pool_same(&self.nodes[x].value, k)?;
        self.push("avg_pool", v, Op::AvgPool { x, k })
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = kernels::pixel_shuffle(&self.nodes[x].value, r)?;
        self.push("pixel_shuffle", v, Op::PixelShuffle { x, r })
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = kernels::pixel_unshuffle(&self.nodes[x].value, r)?;
        self.push("pixel_unshuffle", v, Op::PixelUnshuffle { x, r })
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let v = kernels::bilinear_forward(&self.nodes[x].value, th, tw)?;
        self.push("upsample_bilinear", v, Op::UpsampleBilinear { x })
    }

    // ── Reductions & losses ──────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[x].value.sum());
        self.push("sum_all", v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[x].value.mean());
        self.push("mean_all", v, Op::MeanAll(x))
    }

    /// Weighted binary cross-entropy on logits:
    /// sum((1+w) * (softplus(x) - t*x)) / sum(1+w).
    pub fn weighted_bce(&mut self, logits: NodeId, target: &Tensor, weight: &Tensor) -> Result<NodeId> {
        let x = &self.nodes[logits].value;
        if x.shape() != target.shape() || x.shape() != weight.shape() {
            return Err(Error::dim(
                "weighted_bce",
                format!("logits {:?}, target {:?}, weight {:?}", x.shape(), target.shape(), weight.shape()),
            ));
        }
        if !target.is_binary() {
            return Err(Error::contract("weighted_bce", "target mask is not binary"));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&xv, &tv), &wv) in x.data().iter().zip(target.data()).zip(weight.data()) {
            let a = 1.0 + wv;
            num += a * (kernels::softplus(xv) - tv * xv);
            den += a;
        }
        let v = Tensor::scalar(num / den);
        self.push("weighted_bce", v, Op::WeightedBce { logits, target: target.clone(), weight: weight.clone() })
    }

    /// Weighted IoU loss on an already-activated prediction in [0,1]:
    /// 1 - sum((1+w)*t*p) / sum((1+w)*(t + p - t*p)).
    pub fn weighted_iou(&mut self, p: NodeId, target: &Tensor, weight: &Tensor) -> Result<NodeId> {
        let pv = &self.nodes[p].value;
        if pv.shape() != target.shape() || pv.shape() != weight.shape() {
            return Err(Error::dim(
                "weighted_iou",
                format!("p {:?}, target {:?}, weight {:?}", pv.shape(), target.shape(), weight.shape()),
            ));
        }
        if pv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("weighted_iou", "prediction outside [0,1]"));
        }
        let (inter, union) = iou_terms(pv, target, weight);
        let v = Tensor::scalar(if union == 0.0 { 0.0 } else { 1.0 - inter / union });
        self.push("weighted_iou", v, Op::WeightedIou { p, target: target.clone(), weight: weight.clone() })
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        debug_assert_eq!(self.nodes[id].value.shape(), grad.shape());
        match &mut self.grads[id] {
            Some(g) => g.add_scaled(&grad, 1.0),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse traversal from a scalar loss node. Leaf parameters receive
    /// accumulated (summed) gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].value.shape()),
            ));
        }
        self.grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: NodeId) {
        let grad = self.grads[id].clone().expect("grad present");
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = zip_mul(&grad, &self.nodes[b].value);
                let db = zip_mul(&grad, &self.nodes[a].value);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Affine { x, scale } => {
                self.accumulate(x, grad.map(|v| scale * v));
            }
            Op::MulBcastCh { gate, x } => {
                let (xb, xc, xh, xw) = self.nodes[x].value.dims4().unwrap();
                let plane = xh * xw;
                let gv = self.nodes[gate].value.data();
                let xv = self.nodes[x].value.data();
                let gr = grad.data();
                let mut dgate = Tensor::zeros(&[xb, 1, xh, xw]);
                let mut dx = Tensor::zeros(&[xb, xc, xh, xw]);
                {
                    let dg = dgate.data_mut();
                    let dxv = dx.data_mut();
                    for bi in 0..xb {
                        for ci in 0..xc {
                            let base = (bi * xc + ci) * plane;
                            for p in 0..plane {
                                dg[bi * plane + p] += gr[base + p] * xv[base + p];
                                dxv[base + p] = gr[base + p] * gv[bi * plane + p];
                            }
                        }
                    }
                }
                self.accumulate(gate, dgate);
                self.accumulate(x, dx);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a].value.dims2().unwrap();
                let (_, n) = self.nodes[b].value.dims2().unwrap();
                let bt = kernels::transpose(self.nodes[b].value.data(), k, n);
                let da = kernels::matmul(grad.data(), &bt, m, n, k);
                let at = kernels::transpose(self.nodes[a].value.data(), m, k);
                let db = kernels::matmul(&at, grad.data(), k, m, n);
                self.accumulate(a, Tensor::new(vec![m, k], da).unwrap());
                self.accumulate(b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::Transpose2(x) => {
                let (r, c) = grad.dims2().unwrap();
                let dt = kernels::transpose(grad.data(), r, c);
                self.accumulate(x, Tensor::new(vec![c, r], dt).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x].value.shape().to_vec();
                self.accumulate(x, grad.reshaped(shape).unwrap());
            }
            Op::Concat { xs, axis } => {
                let shape = grad.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_span = shape[axis] * inner;
                let gv = grad.data();
                let mut off = 0usize;
                for x in xs {
                    let xs_shape = self.nodes[x].value.shape().to_vec();
                    let len = xs_shape[axis] * inner;
                    let mut dx = Tensor::zeros(&xs_shape);
                    {
                        let dv = dx.data_mut();
                        for o in 0..outer {
                            dv[o * len..(o + 1) * len]
                                .copy_from_slice(&gv[o * total_span + off..o * total_span + off + len]);
                        }
                    }
                    self.accumulate(x, dx);
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs_shape = self.nodes[x].value.shape().to_vec();
                let outer: usize = xs_shape[..axis].iter().product();
                let inner: usize = xs_shape[axis + 1..].iter().product();
                let src_span = xs_shape[axis] * inner;
                let len = grad.shape()[axis] * inner;
                let gv = grad.data();
                let mut dx = Tensor::zeros(&xs_shape);
                {
                    let dv = dx.data_mut();
                    for o in 0..outer {
                        dv[o * src_span + start * inner..o * src_span + start * inner + len]
                            .copy_from_slice(&gv[o * len..(o + 1) * len]);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let shape = y.shape().to_vec();
                let ext = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let yv = y.data();
                let gv = grad.data();
                let mut dx = Tensor::zeros(&shape);
                {
                    let dv = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * ext * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..ext {
                                dot += gv[at(j)] * yv[at(j)];
                            }
                            for j in 0..ext {
                                dv[at(j)] = yv[at(j)] * (gv[at(j)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                let data = grad
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, o)| g * o * (1.0 - o))
                    .collect();
                self.accumulate(x, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            Op::Gelu(x) => {
                let data = grad
                    .data()
                    .iter()
                    .zip(self.nodes[x].value.data())
                    .map(|(g, &xv)| g * kernels::gelu_grad(xv))
                    .collect();
                self.accumulate(x, Tensor::new(grad.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm { x, gain, offset } => {
                let (dx, dgain, doffset) =
                    kernels::layer_norm_backward(&grad, &self.nodes[x].value, &self.nodes[gain].value);
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
                self.accumulate(offset, doffset);
            }
            Op::Conv2d { x, w, b, spec } => {
                let in_shape = self.nodes[x].value.dims4().unwrap();
                let dx = kernels::conv2d_backward_input(&grad, &self.nodes[w].value, &spec, in_shape);
                let dw = kernels::conv2d_backward_weight(&grad, &self.nodes[x].value, &spec);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                if let Some(bid) = b {
                    self.accumulate(bid, kernels::conv2d_backward_bias(&grad));
                }
            }
            Op::AvgPool { x, k } => {
                // The stride-1 same-padded mean filter is self-adjoint.
                let dx = kernels::avg_pool_same(&grad, k).unwrap();
                self.accumulate(x, dx);
            }
            Op::PixelShuffle { x, r } => {
                self.accumulate(x, kernels::pixel_unshuffle(&grad, r).unwrap());
            }
            Op::PixelUnshuffle { x, r } => {
                self.accumulate(x, kernels::pixel_shuffle(&grad, r).unwrap());
            }
            Op::UpsampleBilinear { x } => {
                let in_shape = self.nodes[x].value.dims4().unwrap();
                self.accumulate(x, kernels::bilinear_backward(&grad, in_shape));
            }
            Op::SumAll(x) => {
                let g = grad.item();
                self.accumulate(x, Tensor::full(self.nodes[x].value.shape(), g));
            }
            Op::MeanAll(x) => {
                let g = grad.item() / self.nodes[x].value.numel() as f64;
                self.accumulate(x, Tensor::full(self.nodes[x].value.shape(), g));
            }
            Op::WeightedBce { logits, target, weight } => {
                let g = grad.item();
                let den: f64 = weight.data().iter().map(|w| 1.0 + w).sum();
                let data = self.nodes[logits]
                    .value
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&x, &t), &w)| g * (1.0 + w) * (kernels::sigmoid(x) - t) / den)
                    .collect();
                self.accumulate(logits, Tensor::new(target.shape().to_vec(), data).unwrap());
            }
            Op::WeightedIou { p, target, weight } => {
                let g = grad.item();
                let pv = &self.nodes[p].value;
                let (inter, union) = iou_terms(pv, &target, &weight);
                let data: Vec<f64> = if union == 0.0 {
                    vec![0.0; pv.numel()]
                } else {
                    pv.data()
                        .iter()
                        .zip(target.data())
                        .zip(weight.data())
                        .map(|((_, &t), &w)| {
                            let a = 1.0 + w;
                            // d(1 - I/U)/dp = (I*dU - dI*U)/U^2 with dI = a*t, dU = a*(1-t)
                            g * (inter * a * (1.0 - t) - a * t * union) / (union * union)
                        })
                        .collect()
                };
                self.accumulate(p, Tensor::new(pv.shape().to_vec(), data).unwrap());
            }
        }
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn iou_terms(p: &Tensor, target: &Tensor, weight: &Tensor) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&pv, &tv), &wv) in p.data().iter().zip(target.data()).zip(weight.data()) {
        let a = 1.0 + wv;
        inter += a * tv * pv;
        union += a * (tv + pv - tv * pv);
    }
    (inter, union)
}

// ── Finite-difference verification ───────────────────────────────────

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Max relative error between the analytic gradient of a scalar function and
/// central finite differences: |a - n| / max(1e-8, |a| + |n|).
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !x.all_finite() {
        return Err(Error::contract("gradcheck", "probe tensor not finite"));
    }
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = f(&mut g, xid)?;
    if !g.value(out).is_scalar() {
        return Err(Error::contract("gradcheck", "function is not scalar-valued"));
    }
    g.backward(out)?;
    let analytic = match g.grad(xid) {
        Some(t) => t.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(probe.clone());
        let out = f(&mut g, xid)?;
        Ok(g.value(out).item())
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
