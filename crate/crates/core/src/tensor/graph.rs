//! Eager reverse-mode autodiff tape.
//!
//! Every operation computes its output immediately and appends a node, so
//! node inputs always refer to earlier nodes and the tape is topologically
//! ordered by construction. [`Graph::backward`] walks it in reverse.

use crate::error::{Error, Result};

use super::array::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Identity(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f32),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    Reshape(NodeId),
    TemporalShift {
        x: NodeId,
        fold: usize,
        segment: usize,
    },
    MaskNormalize(NodeId),
    Standardize {
        x: NodeId,
        inv_std: Vec<f32>,
    },
    Mse(NodeId, NodeId),
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    requires_grad: bool,
}

/// Variance floor used by [`Graph::standardize`].
pub const STANDARDIZE_EPS: f32 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    /// Ids of the operands feeding `id`, empty for leaves.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf => vec![],
            Op::Identity(a)
            | Op::ScalarMul(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::MaskNormalize(a)
            | Op::Sum(a) => vec![*a],
            Op::AvgPool2d { x, .. } | Op::TemporalShift { x, .. } | Op::Standardize { x, .. } => {
                vec![*x]
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, msg: impl Into<String>) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            msg: msg.into(),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].trainable = true;
        id
    }

    /// Leaf treated as a constant.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn identity(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        let rg = self.rg(a);
        self.push(Op::Identity(a), v, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Elementwise product. `b` may have size 1 along axis 1 and is then
    /// broadcast over that axis (a `[N,1,h,w]` mask gating `[N,C,h,w]`).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if let Some((outer, chans, inner)) = channel_broadcast(va.shape(), vb.shape()) {
            let mut data = va.data().to_vec();
            let m = vb.data();
            for n in 0..outer {
                let mrow = &m[n * inner..(n + 1) * inner];
                for c in 0..chans {
                    let base = (n * chans + c) * inner;
                    for (x, g) in data[base..base + inner].iter_mut().zip(mrow) {
                        *x *= g;
                    }
                }
            }
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            return Err(self.shape_err(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f32) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::ScalarMul(a, s), out, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f32::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    /// 2-D convolution (cross-correlation). `x: [N,C,H,W]`, `w: [O,C,kh,kw]`,
    /// optional `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(self.shape_err(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(self.shape_err(format!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(self.shape_err("conv2d: stride 0"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(self.shape_err(format!(
                    "conv2d: bias {:?}, expected [{}]",
                    self.value(b).shape(),
                    ws[0]
                )));
            }
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(self.shape_err(format!(
                        "conv2d: kernel {kh}x{kw} larger than input {h}x{wd}"
                    )));
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        };
        let (ckk, ohw) = (geom.ckk(), geom.ohw());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; n * o * ohw];
        let keep_cols = self.rg(w);
        let mut cols = if keep_cols {
            vec![0.0f32; n * ckk * ohw]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0f32; if keep_cols { 0 } else { ckk * ohw }];
        for s in 0..n {
            let col = if keep_cols {
                &mut cols[s * ckk * ohw..(s + 1) * ckk * ohw]
            } else {
                &mut scratch[..]
            };
            im2col(&geom, &xv[s * c * h * wd..(s + 1) * c * h * wd], col);
            gemm(
                o,
                ckk,
                ohw,
                wv,
                (ckk, 1),
                col,
                (ohw, 1),
                0.0,
                &mut out[s * o * ohw..(s + 1) * o * ohw],
                (ohw, 1),
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for (k, &bias) in bv.iter().enumerate() {
                    let base = (s * o + k) * ohw;
                    out[base..base + ohw].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            value,
            rg,
        ))
    }

    /// Fully connected layer: `x: [N,F]`, `w: [F,O]`, `b: [O]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(self.shape_err(format!("dense: input {xs:?}, weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(self.shape_err(format!(
                    "dense: bias {:?}, expected [{o}]",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = vec![0.0f32; n * o];
        gemm(
            n,
            f,
            o,
            self.value(x).data(),
            (f, 1),
            self.value(w).data(),
            (o, 1),
            0.0,
            &mut out,
            (o, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(Op::Dense { x, w, b }, value, rg))
    }

    /// Non-overlapping `k×k` mean pooling over the last two axes of `[N,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || k == 0 || !xs[2].is_multiple_of(k) || !xs[3].is_multiple_of(k) {
            return Err(self.shape_err(format!("avg_pool2d({k}) on {xs:?}")));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; nc * oh * ow];
        let scale = 1.0 / (k * k) as f32;
        for p in 0..nc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(Op::AvgPool2d { x, k }, value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone();
        let from = v.shape().to_vec();
        let value = v
            .reshape(shape)
            .map_err(|_| self.shape_err(format!("reshape {from:?} -> {shape:?}")))?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Temporal shift on `[N,C,h,w]` where N is a stack of clips of
    /// `segment` frames each. The first `fold` channels take frame `t-1`, the
    /// next `fold` take frame `t+1`; vacated positions are zero. Frames never
    /// cross a clip boundary.
    pub fn temporal_shift(&mut self, x: NodeId, fold: usize, segment: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || segment == 0 || !xs[0].is_multiple_of(segment) {
            return Err(self.shape_err(format!(
                "temporal_shift: {xs:?} with clip length {segment}"
            )));
        }
        if 2 * fold > xs[1] {
            return Err(self.shape_err(format!(
                "temporal_shift: fold {fold} exceeds half of {} channels",
                xs[1]
            )));
        }
        let out = shift_forward(self.value(x).data(), &xs, fold, segment);
        let rg = self.rg(x);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::TemporalShift { x, fold, segment }, value, rg))
    }

    /// Rescale each sample (axis 0) so that its elements average to one.
    pub fn mask_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.len() / n;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(per) {
            let s: f64 = row.iter().map(|&a| a as f64).sum();
            if s <= 0.0 {
                return Err(self.shape_err("mask_normalize: non-positive mask sum"));
            }
            let scale = (per as f64 / s) as f32;
            row.iter_mut().for_each(|a| *a *= scale);
        }
        let rg = self.rg(x);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(Op::MaskNormalize(x), value, rg))
    }

    /// Standardize every row of a `[B,T]` tensor to zero mean and unit
    /// variance (population variance plus [`STANDARDIZE_EPS`]).
    pub fn standardize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(self.shape_err(format!("standardize expects [B,T], got {:?}", v.shape())));
        }
        let t = v.shape()[1];
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(v.shape()[0]);
        for row in out.chunks_mut(t) {
            let (mean, var) = mean_var(row);
            let is = 1.0 / (var + STANDARDIZE_EPS as f64).sqrt();
            row.iter_mut()
                .for_each(|a| *a = ((*a as f64 - mean) * is) as f32);
            inv_std.push(is as f32);
        }
        let rg = self.rg(x);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(Op::Standardize { x, inv_std }, value, rg))
    }

    /// Mean squared error, a scalar.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(self.shape_err(format!(
                "mse_loss: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((s / p.len() as f64) as f32);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mse(pred, target), value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let slots = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if n.trainable {
                    Some(
                        grads[i]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { slots })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Identity(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::new(shape, gd.to_vec()).unwrap());
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.rg(*id) {
                        accumulate(grads, *id, g.clone());
                    }
                }
            }
            Op::ScalarMul(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() == vb.shape() {
                    if self.rg(*a) {
                        let d = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                        accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                    }
                    if self.rg(*b) {
                        let d = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                        accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                    }
                } else {
                    let (outer, chans, inner) = channel_broadcast(va.shape(), vb.shape()).unwrap();
                    if self.rg(*a) {
                        let mut d = gd.to_vec();
                        let m = vb.data();
                        for n in 0..outer {
                            for c in 0..chans {
                                let base = (n * chans + c) * inner;
                                for (k, v) in d[base..base + inner].iter_mut().enumerate() {
                                    *v *= m[n * inner + k];
                                }
                            }
                        }
                        accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                    }
                    if self.rg(*b) {
                        let mut d = vec![0.0f32; vb.len()];
                        let x = va.data();
                        for n in 0..outer {
                            for c in 0..chans {
                                let base = (n * chans + c) * inner;
                                for k in 0..inner {
                                    d[n * inner + k] += gd[base + k] * x[base + k];
                                }
                            }
                        }
                        accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, gd, grads),
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; n * f];
                    gemm(n, o, f, gd, (o, 1), wv.data(), (1, o), 0.0, &mut dx, (f, 1));
                    accumulate(grads, *x, Tensor::new(vec![n, f], dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; f * o];
                    gemm(f, n, o, xv.data(), (1, f), gd, (o, 1), 0.0, &mut dw, (o, 1));
                    accumulate(grads, *w, Tensor::new(vec![f, o], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![0.0f32; o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, b, Tensor::new(vec![o], db).unwrap());
                }
            }
            Op::AvgPool2d { x, k } => {
                let xs = self.value(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let ow = w / k;
                let oh = h / k;
                let scale = 1.0 / (k * k) as f32;
                let mut d = vec![0.0f32; nc * h * w];
                for p in 0..nc {
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / k) * ow + xx / k] * scale;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), d).unwrap());
            }
            Op::TemporalShift { x, fold, segment } => {
                let xs = self.value(*x).shape().to_vec();
                let d = shift_backward(gd, &xs, *fold, *segment);
                accumulate(grads, *x, Tensor::new(xs, d).unwrap());
            }
            Op::MaskNormalize(a) => {
                let y = node.value.data();
                let xv = self.value(*a);
                let n = xv.shape()[0];
                let per = xv.len() / n;
                let mut d = vec![0.0f32; xv.len()];
                for s in 0..n {
                    let r = s * per..(s + 1) * per;
                    let sum: f64 = xv.data()[r.clone()].iter().map(|&v| v as f64).sum();
                    let gy: f64 = gd[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(&g, &y)| g as f64 * y as f64)
                        .sum::<f64>()
                        / per as f64;
                    let scale = per as f64 / sum;
                    for k in r {
                        d[k] = (scale * (gd[k] as f64 - gy)) as f32;
                    }
                }
                accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Standardize { x, inv_std } => {
                let y = node.value.data();
                let t = node.value.shape()[1];
                let mut d = vec![0.0f32; y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let rg = r * t..(r + 1) * t;
                    let gm: f64 = gd[rg.clone()].iter().map(|&v| v as f64).sum::<f64>() / t as f64;
                    let gy: f64 = gd[rg.clone()]
                        .iter()
                        .zip(&y[rg.clone()])
                        .map(|(&g, &y)| g as f64 * y as f64)
                        .sum::<f64>()
                        / t as f64;
                    for k in rg {
                        d[k] = (is as f64 * (gd[k] as f64 - gm - y[k] as f64 * gy)) as f32;
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * gd[0] / va.len() as f32;
                let diff: Vec<f32> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| (x - y) * scale)
                    .collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), neg).unwrap());
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(va.shape().to_vec(), diff).unwrap());
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                accumulate(grads, *a, Tensor::full(shape, gd[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        cols: &[f32],
        gd: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let (ckk, ohw, o) = (geom.ckk(), geom.ohw(), geom.o);
        let chw = geom.c * geom.h * geom.w;
        if self.rg(w) {
            let mut dw = vec![0.0f32; o * ckk];
            for s in 0..geom.n {
                gemm(
                    o,
                    ohw,
                    ckk,
                    &gd[s * o * ohw..(s + 1) * o * ohw],
                    (ohw, 1),
                    &cols[s * ckk * ohw..(s + 1) * ckk * ohw],
                    (1, ohw),
                    1.0,
                    &mut dw,
                    (ckk, 1),
                );
            }
            let shape = self.value(w).shape().to_vec();
            accumulate(grads, w, Tensor::new(shape, dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.rg(*b)) {
            let mut db = vec![0.0f32; o];
            for s in 0..geom.n {
                for (k, d) in db.iter_mut().enumerate() {
                    let base = (s * o + k) * ohw;
                    *d += gd[base..base + ohw].iter().sum::<f32>();
                }
            }
            accumulate(grads, b, Tensor::new(vec![o], db).unwrap());
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            let mut dx = vec![0.0f32; geom.n * chw];
            let mut dcol = vec![0.0f32; ckk * ohw];
            for s in 0..geom.n {
                gemm(
                    ckk,
                    o,
                    ohw,
                    wv,
                    (1, ckk),
                    &gd[s * o * ohw..(s + 1) * o * ohw],
                    (ohw, 1),
                    0.0,
                    &mut dcol,
                    (ohw, 1),
                );
                col2im(geom, &dcol, &mut dx[s * chw..(s + 1) * chw]);
            }
            let shape = self.value(x).shape().to_vec();
            accumulate(grads, x, Tensor::new(shape, dx).unwrap());
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&a| a as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&a| {
            let d = a as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// `(outer, chans, inner)` when `b` equals `a` with axis 1 collapsed to 1.
fn channel_broadcast(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize)> {
    if a.len() < 2 || a.len() != b.len() || b[1] != 1 || a[0] != b[0] || a[2..] != b[2..] {
        return None;
    }
    Some((a[0], a[1], a[2..].iter().product()))
}

fn shift_forward(x: &[f32], shape: &[usize], fold: usize, segment: usize) -> Vec<f32> {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let mut out = x.to_vec();
    let at = |t: usize, ch: usize| (t * c + ch) * hw;
    for t in 0..n {
        let pos = t % segment;
        for ch in 0..2 * fold {
            let dst = at(t, ch);
            let src_t = if ch < fold {
                (pos > 0).then(|| t - 1)
            } else {
                (pos + 1 < segment).then_some(t + 1)
            };
            match src_t {
                Some(st) => out[dst..dst + hw].copy_from_slice(&x[at(st, ch)..at(st, ch) + hw]),
                None => out[dst..dst + hw].fill(0.0),
            }
        }
    }
    out
}

fn shift_backward(g: &[f32], shape: &[usize], fold: usize, segment: usize) -> Vec<f32> {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let mut d = g.to_vec();
    let at = |t: usize, ch: usize| (t * c + ch) * hw;
    for t in 0..n {
        for ch in 0..2 * fold {
            d[at(t, ch)..at(t, ch) + hw].fill(0.0);
        }
    }
    for t in 0..n {
        let pos = t % segment;
        for ch in 0..2 * fold {
            let src_t = if ch < fold {
                (pos > 0).then(|| t - 1)
            } else {
                (pos + 1 < segment).then_some(t + 1)
            };
            if let Some(st) = src_t {
                for k in 0..hw {
                    d[at(st, ch) + k] += g[at(t, ch) + k];
                }
            }
        }
    }
    d
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let ohw = g.ohw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row/column-strided matrices (`(row, col)` strides).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>())
    }

    /// Loss = Σ out ⊙ probe for a fixed random probe.
    fn probe_loss(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        let probe = random(g.value(out).shape(), rng);
        let p = g.input(probe);
        let prod = g.mul(out, p).unwrap();
        g.sum(prod)
    }

    /// Norm-wise relative error between backprop and central differences
    /// (step 1e-3) for every leaf in `leaves`.
    fn gradcheck(
        leaves: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    ) -> f64 {
        let eval = |vals: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
            let loss = build(&mut g, &ids);
            (g, ids, loss)
        };
        let (g, ids, loss) = eval(&leaves);
        let grads = g.backward(loss).unwrap();
        let (mut num, mut diff, mut den) = (0.0f64, 0.0f64, 0.0f64);
        let h = 1e-3f32;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]).unwrap().data().to_vec();
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= h;
                let (gp, _, lp) = eval(&plus);
                let (gm, _, lm) = eval(&minus);
                let fd = (gp.value(lp).item() as f64 - gm.value(lm).item() as f64) / (2.0 * h as f64);
                diff += (fd - analytic[k] as f64).powi(2);
                num += fd * fd;
                den += (analytic[k] as f64).powi(2);
            }
        }
        diff.sqrt() / (num.sqrt() + den.sqrt()).max(1e-12)
    }

    #[test]
    fn identity_is_bitwise() {
        let x = t(&[2, 2], &[1.5, -0.0, f32::MIN_POSITIVE, 3.0]);
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let y = g.identity(a);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_dense_gives_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3, 4], &[1.0; 12]));
        let w = g.param(Tensor::zeros(&[4, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_1x1_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(&[2, 1, 5, 7], &mut rng);
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let w = g.param(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn primitive_hand_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.avg_pool2d(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);

        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);

        let img = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let c = g.conv2d(img, k, None, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(c).data(), &[9.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, 1.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mse_hand_gradient() {
        // L = (w·x - y)², w=0, x=1, y=1 → dL/dw = -2
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1], &[1.0]));
        let w = g.param(t(&[1, 1], &[0.0]));
        let y = g.input(t(&[1, 1], &[1.0]));
        let pred = g.dense(x, w, None).unwrap();
        let l = g.mse_loss(pred, y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[-2.0]);
    }

    #[test]
    fn temporal_shift_examples() {
        // T=3, C=4, 1x1 spatial; channel c at frame t holds 10c + t + 1
        let data: Vec<f32> = (0..3)
            .flat_map(|tt| (0..4).map(move |c| (10 * c + tt + 1) as f32))
            .collect();
        let mut g = Graph::new();
        let x = g.input(t(&[3, 4, 1, 1], &data));
        let y = g.temporal_shift(x, 1, 3).unwrap();
        let v = g.value(y).data();
        let chan = |c: usize| (0..3).map(|tt| v[tt * 4 + c]).collect::<Vec<_>>();
        assert_eq!(chan(0), vec![0.0, 1.0, 2.0]);
        assert_eq!(chan(1), vec![12.0, 13.0, 0.0]);
        assert_eq!(chan(2), vec![21.0, 22.0, 23.0]);
        assert_eq!(chan(3), vec![31.0, 32.0, 33.0]);
        let ident = g.temporal_shift(x, 0, 3).unwrap();
        assert_eq!(g.value(ident).data(), &data[..]);
    }

    #[test]
    fn temporal_shift_respects_clip_boundaries() {
        let data: Vec<f32> = (1..=4).map(|v| v as f32).collect();
        let mut g = Graph::new();
        // two clips of 2 frames, 2 channels
        let x = g.input(t(&[4, 2, 1, 1], &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]));
        let y = g.temporal_shift(x, 1, 2).unwrap();
        let v = g.value(y).data();
        assert_eq!([v[0], v[2], v[4], v[6]], [0.0, data[0], 0.0, data[2]]);
        assert_eq!([v[1], v[3], v[5], v[7]], [6.0, 0.0, 8.0, 0.0]);
    }

    #[test]
    fn mask_normalize_gives_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = random(&[4, 1, 3, 3], &mut rng).map(|v| v.abs() + 0.01);
        let mut g = Graph::new();
        let x = g.input(raw);
        let y = g.mask_normalize(x).unwrap();
        for row in g.value(y).data().chunks(9) {
            let mean: f32 = row.iter().sum::<f32>() / 9.0;
            assert!((mean - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, 2),
            other => panic!("{other:?}"),
        }
        let w = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.dense(a, w, None).is_err());
        let l = g.identity(a);
        assert!(matches!(g.backward(l), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn unreached_trainable_leaf_gets_zero_slot() {
        let mut g = Graph::new();
        let used = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let l = g.sum(used);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases: Vec<(&str, f64)> = vec![
                ("conv_same", {
                    let leaves = vec![random(&[2, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)];
                    let s = seed;
                    gradcheck(leaves, move |g, ids| {
                        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, Padding::Same).unwrap();
                        probe_loss(g, y, &mut ChaCha8Rng::seed_from_u64(s + 100))
                    })
                }),
                ("conv_valid_stride2", {
                    let leaves = vec![random(&[1, 2, 6, 7], &mut rng), random(&[2, 2, 3, 2], &mut rng)];
                    let s = seed;
                    gradcheck(leaves, move |g, ids| {
                        let y = g.conv2d(ids[0], ids[1], None, 2, Padding::Valid).unwrap();
                        probe_loss(g, y, &mut ChaCha8Rng::seed_from_u64(s + 200))
                    })
                }),
                ("dense", {
                    let leaves = vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)];
                    let s = seed;
                    gradcheck(leaves, move |g, ids| {
                        let y = g.dense(ids[0], ids[1], Some(ids[2])).unwrap();
                        probe_loss(g, y, &mut ChaCha8Rng::seed_from_u64(s + 300))
                    })
                }),
                ("tanh_sigmoid_pool", {
                    let leaves = vec![random(&[2, 2, 4, 4], &mut rng)];
                    let s = seed;
                    gradcheck(leaves, move |g, ids| {
                        let a = g.tanh(ids[0]);
                        let b = g.sigmoid(a);
                        let p = g.avg_pool2d(b, 2).unwrap();
                        probe_loss(g, p, &mut ChaCha8Rng::seed_from_u64(s + 400))
                    })
                }),
                ("mul_broadcast_normalize_shift", {
                    let leaves = vec![random(&[4, 3, 2, 2], &mut rng), random(&[4, 1, 2, 2], &mut rng)];
                    let s = seed;
                    gradcheck(leaves, move |g, ids| {
                        let m = g.sigmoid(ids[1]);
                        let m = g.mask_normalize(m).unwrap();
                        let sh = g.temporal_shift(ids[0], 1, 2).unwrap();
                        let y = g.mul(sh, m).unwrap();
                        let y = g.scalar_mul(y, 0.7);
                        probe_loss(g, y, &mut ChaCha8Rng::seed_from_u64(s + 500))
                    })
                }),
                ("standardize_mse", {
                    let leaves = vec![random(&[2, 6], &mut rng), random(&[2, 6], &mut rng)];
                    gradcheck(leaves, |g, ids| {
                        let a = g.standardize(ids[0]).unwrap();
                        g.mse_loss(a, ids[1]).unwrap()
                    })
                }),
            ];
            for (name, err) in cases {
                assert!(err < 1e-3, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = random(&[3, 4], &mut rng);
        let wv = random(&[4, 2], &mut rng);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.input(xv.clone());
            let w = g.param(wv.clone());
            let y = g.dense(x, w, None).unwrap();
            let t1 = g.tanh(y);
            let l1 = g.sum(t1);
            let sq = g.mul(y, y).unwrap();
            let l2 = g.sum(sq);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(loss).unwrap().get(w).unwrap().clone()
        };
        let (a, b, both) = (grad_of(1), grad_of(2), grad_of(3));
        for k in 0..both.len() {
            assert!((a.data()[k] + b.data()[k] - both.data()[k]).abs() < 1e-5);
        }
    }
}
