//! Reverse-mode autodiff tape.
//!
//! The tape records every forward operation; [`Tape::backward`] traverses
//! the records in strict reverse order and accumulates gradients into
//! per-node buffers. Inner products and reductions accumulate in f64 and
//! store f32, so replaying the same graph is bit-identical.
//!
//! The operator set is exactly what the model and losses need; there is
//! no broadcasting beyond the one channel-broadcast case of
//! [`Tape::elemwise_mul`].

use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

/// Identity of a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    ElemwiseMul {
        a: NodeId,
        b: NodeId,
    },
    ReduceMean {
        input: NodeId,
    },
    ReduceMax {
        input: NodeId,
        argmax: u32,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
    AddConst {
        input: NodeId,
    },
    Abs {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    AffineSpan {
        alpha: NodeId,
        offset: Tensor,
        basis: Tensor,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
    L1ToTarget {
        input: NodeId,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f32>>,
}

/// Spatial extent of a conv/pool input: (batch, h, w, c, batched?).
fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        n => Err(Error::shape(format!(
            "expected HxWxC or NxHxWxC input, got rank {n}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Gradient buffer of a node; zeros until `backward` has run.
    pub fn grad(&self, id: NodeId) -> &[f32] {
        &self.grads[id.0]
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// 2-D convolution with zero padding. Input HxWxCin or NxHxWxCin,
    /// kernel kh x kw x Cin x Cout, bias length Cout.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, h, w, ci, batched) = spatial_dims(self.value(input).shape())?;
        let kshape = self.value(kernel).shape();
        if kshape.len() != 4 {
            return Err(Error::shape("conv kernel must be kh x kw x Cin x Cout"));
        }
        let (kh, kw, kci, co) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv kernel extents must be odd"));
        }
        if stride < 1 {
            return Err(Error::shape("conv stride must be >= 1"));
        }
        if kci != ci {
            return Err(Error::shape(format!(
                "conv input has {ci} channels, kernel expects {kci}"
            )));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape("conv bias length must equal Cout"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0f32; n * oh * ow * co];
        let mut acc = vec![0.0f64; co];
        for ni in 0..n {
            let x_base = ni * h * w * ci;
            let o_base = ni * oh * ow * co;
            for oy in 0..oh {
                for ox in 0..ow {
                    for (a, &bv) in acc.iter_mut().zip(b) {
                        *a = bv as f64;
                    }
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xq = (ox * stride + kx) as isize - pad as isize;
                            if xq < 0 || xq >= w as isize {
                                continue;
                            }
                            let xi = x_base + (y as usize * w + xq as usize) * ci;
                            let ki = ((ky * kw + kx) * ci) * co;
                            for c in 0..ci {
                                let a = x[xi + c] as f64;
                                let krow = &k[ki + c * co..ki + c * co + co];
                                for (o, &kv) in acc.iter_mut().zip(krow) {
                                    *o += a * kv as f64;
                                }
                            }
                        }
                    }
                    let oi = o_base + (oy * ow + ox) * co;
                    for (dst, &a) in out[oi..oi + co].iter_mut().zip(acc.iter()) {
                        *dst = a as f32;
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, oh, ow, co]
        } else {
            vec![oh, ow, co]
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Non-overlapping k x k max pooling; H and W must divide by k.
    /// Backward routes the gradient to the argmax (ties: first in
    /// row-major scan).
    pub fn maxpool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let (n, h, w, c, batched) = spatial_dims(self.value(input).shape())?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "pool size {k} must divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * oh * ow * c];
        let mut argmax = vec![0u32; out.len()];
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx =
                                    ((ni * h + oy * k + dy) * w + ox * k + dx) * c + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        let oi = ((ni * oh + oy) * ow + ox) * c + ch;
                        out[oi] = best;
                        argmax[oi] = best_idx;
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, oh, ow, c]
        } else {
            vec![oh, ow, c]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2d { input, argmax }))
    }

    /// Fully connected layer on a vector: out = x^T W + b.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let ws = self.value(weights).shape();
        if xs.len() != 1 || ws.len() != 2 {
            return Err(Error::shape("dense expects vector input and 2-D weights"));
        }
        let (m, nn) = (ws[0], ws[1]);
        if xs[0] != m {
            return Err(Error::shape(format!(
                "dense input length {} does not match weight rows {m}",
                xs[0]
            )));
        }
        if self.value(bias).shape() != [nn] {
            return Err(Error::shape("dense bias length must equal weight cols"));
        }
        let x = self.value(input).data();
        let wdata = self.value(weights).data();
        let b = self.value(bias).data();
        let mut acc: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        for (i, &xv) in x.iter().enumerate() {
            let row = &wdata[i * nn..(i + 1) * nn];
            let xv = xv as f64;
            for (a, &wv) in acc.iter_mut().zip(row) {
                *a += xv * wv as f64;
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        Ok(self.push(
            Tensor::new(vec![nn], out)?,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f32> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
            .collect();
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Sigmoid { input })
    }

    /// Numerically stabilized softmax over a vector.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).ndim() != 1 {
            return Err(Error::shape("softmax expects a vector"));
        }
        let x = self.value(input).data();
        let m = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let exps: Vec<f64> = x.iter().map(|&v| ((v as f64) - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f32> = exps.iter().map(|&e| (e / sum) as f32).collect();
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input }))
    }

    /// Element-wise product. Either both operands share a shape, or `b`
    /// of shape HxW broadcasts over `a` of shape HxWxC.
    pub fn elemwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let broadcast = sa.len() == 3 && sb.len() == 2 && sa[0] == sb[0] && sa[1] == sb[1];
        if !(sa == sb || broadcast) {
            return Err(Error::shape(format!(
                "elemwise_mul cannot combine {sa:?} with {sb:?}"
            )));
        }
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let out: Vec<f32> = if broadcast {
            let c = sa[2];
            xa.iter()
                .enumerate()
                .map(|(i, &v)| v * xb[i / c])
                .collect()
        } else {
            xa.iter().zip(xb).map(|(&x, &y)| x * y).collect()
        };
        Ok(self.push(Tensor::new(sa, out)?, Op::ElemwiseMul { a, b }))
    }

    /// Mean over all elements, as a scalar node.
    pub fn reduce_mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input).data();
        let sum: f64 = x.iter().map(|&v| v as f64).sum();
        let mean = (sum / x.len() as f64) as f32;
        self.push(Tensor::scalar(mean), Op::ReduceMean { input })
    }

    /// Maximum over all elements, as a scalar node. The gradient flows to
    /// the argmax element only (ties: first in row-major scan).
    pub fn reduce_max(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input).data();
        let mut best = f32::NEG_INFINITY;
        let mut arg = 0u32;
        for (i, &v) in x.iter().enumerate() {
            if v > best {
                best = v;
                arg = i as u32;
            }
        }
        self.push(Tensor::scalar(best), Op::ReduceMax { input, argmax: arg })
    }

    /// HxWxC -> C mean over the spatial extent.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool expects HxWxC"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let x = self.value(input).data();
        let mut acc = vec![0.0f64; c];
        for px in 0..h * w {
            for ch in 0..c {
                acc[ch] += x[px * c + ch] as f64;
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| (v / (h * w) as f64) as f32).collect();
        Ok(self.push(Tensor::new(vec![c], out)?, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add expects identical shapes"));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { input, factor })
    }

    pub fn add_const(&mut self, input: NodeId, offset: f32) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v + offset).collect();
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::AddConst { input })
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v.abs()).collect();
        let shape = self.value(input).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Abs { input })
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::shape(format!(
                "reshape to {:?} changes element count",
                shape
            )));
        }
        let data = self.value(input).data().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { input }))
    }

    /// offset + basis . alpha, with constant offset (length d) and basis
    /// (d x n); alpha is the differentiable input.
    pub fn affine_span(&mut self, offset: &Tensor, basis: &Tensor, alpha: NodeId) -> Result<NodeId> {
        let bs = basis.shape();
        if bs.len() != 2 || offset.numel() != bs[0] {
            return Err(Error::shape("affine_span: offset length must match basis rows"));
        }
        let n = bs[1];
        if self.value(alpha).shape() != [n] {
            return Err(Error::shape(format!(
                "affine_span: alpha length must be {n}"
            )));
        }
        let al = self.value(alpha).data();
        let bd = basis.data();
        let out: Vec<f32> = offset
            .data()
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let row = &bd[i * n..(i + 1) * n];
                let mut acc = o as f64;
                for (&bv, &av) in row.iter().zip(al) {
                    acc += bv as f64 * av as f64;
                }
                acc as f32
            })
            .collect();
        Ok(self.push(
            Tensor::new(vec![offset.numel()], out)?,
            Op::AffineSpan {
                alpha,
                offset: offset.clone(),
                basis: basis.clone(),
            },
        ))
    }

    /// Cross-entropy of a logit vector against a class index, numerically
    /// stabilized through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.ndim() != 1 {
            return Err(Error::shape("cross_entropy expects a logit vector"));
        }
        if label >= v.numel() {
            return Err(Error::usage(format!(
                "label {label} out of range for {} logits",
                v.numel()
            )));
        }
        let x = v.data();
        let m = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let lse = m + x.iter().map(|&v| ((v as f64) - m).exp()).sum::<f64>().ln();
        let loss = (lse - x[label] as f64) as f32;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// Mean absolute deviation from a constant target of the same shape.
    pub fn l1_to_target(&mut self, input: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(input).shape() != target.shape() {
            return Err(Error::shape(format!(
                "l1_to_target: input {:?} vs target {:?}",
                self.value(input).shape(),
                target.shape()
            )));
        }
        let x = self.value(input).data();
        let sum: f64 = x
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| ((a - b) as f64).abs())
            .sum();
        let loss = (sum / x.len() as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1ToTarget {
                input,
                target: target.clone(),
            },
        ))
    }

    /// Populate gradients for every node reachable from a scalar loss;
    /// unreachable nodes keep zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage("backward requires a scalar loss node"));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0f32; n.value.numel()])
            .collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let g: &[f32] = &rest[0];
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let (n, h, w, ci, _) = spatial_dims(self.nodes[input.0].value.shape())?;
                    let ks = self.nodes[kernel.0].value.shape();
                    let (kh, kw, co) = (ks[0], ks[1], ks[3]);
                    let os = self.nodes[i].value.shape();
                    let (oh, ow) = if os.len() == 4 {
                        (os[1], os[2])
                    } else {
                        (os[0], os[1])
                    };
                    let x = self.nodes[input.0].value.data();
                    let k = self.nodes[kernel.0].value.data();
                    let mut dx = vec![0.0f64; x.len()];
                    let mut dk = vec![0.0f64; k.len()];
                    let mut db = vec![0.0f64; co];
                    for ni in 0..n {
                        let x_base = ni * h * w * ci;
                        let o_base = ni * oh * ow * co;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let oi = o_base + (oy * ow + ox) * co;
                                let gout = &g[oi..oi + co];
                                for (d, &gv) in db.iter_mut().zip(gout) {
                                    *d += gv as f64;
                                }
                                for ky in 0..kh {
                                    let y = (oy * stride + ky) as isize - *pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xq = (ox * stride + kx) as isize - *pad as isize;
                                        if xq < 0 || xq >= w as isize {
                                            continue;
                                        }
                                        let xi =
                                            x_base + (y as usize * w + xq as usize) * ci;
                                        let ki = ((ky * kw + kx) * ci) * co;
                                        for c in 0..ci {
                                            let a = x[xi + c] as f64;
                                            let krow = &k[ki + c * co..ki + c * co + co];
                                            let dkrow =
                                                &mut dk[ki + c * co..ki + c * co + co];
                                            let mut acc = 0.0f64;
                                            for ((dko, &kv), &gv) in
                                                dkrow.iter_mut().zip(krow).zip(gout)
                                            {
                                                let gv = gv as f64;
                                                *dko += a * gv;
                                                acc += kv as f64 * gv;
                                            }
                                            dx[xi + c] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_assign(&mut before[input.0], &dx);
                    add_assign(&mut before[kernel.0], &dk);
                    add_assign(&mut before[bias.0], &db);
                }
                Op::MaxPool2d { input, argmax } => {
                    let dst = &mut before[input.0];
                    for (o, &src) in argmax.iter().enumerate() {
                        dst[src as usize] += g[o];
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.nodes[input.0].value.data();
                    let wv = self.nodes[weights.0].value.data();
                    let n = self.nodes[bias.0].value.numel();
                    let mut dx = vec![0.0f64; x.len()];
                    let mut dw = vec![0.0f64; wv.len()];
                    for (ii, &xv) in x.iter().enumerate() {
                        let row = &wv[ii * n..(ii + 1) * n];
                        let drow = &mut dw[ii * n..(ii + 1) * n];
                        let mut acc = 0.0f64;
                        for ((dwo, &wvv), &gv) in drow.iter_mut().zip(row).zip(g) {
                            let gv = gv as f64;
                            *dwo += xv as f64 * gv;
                            acc += wvv as f64 * gv;
                        }
                        dx[ii] = acc;
                    }
                    add_assign(&mut before[input.0], &dx);
                    add_assign(&mut before[weights.0], &dw);
                    for (d, &gv) in before[bias.0].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    for ((d, &xv), &gv) in before[input.0].iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let s = self.nodes[i].value.data();
                    for ((d, &sv), &gv) in before[input.0].iter_mut().zip(s).zip(g) {
                        *d += gv * sv * (1.0 - sv);
                    }
                }
                Op::Softmax { input } => {
                    let s = self.nodes[i].value.data();
                    let dot: f64 = s
                        .iter()
                        .zip(g)
                        .map(|(&sv, &gv)| sv as f64 * gv as f64)
                        .sum();
                    for ((d, &sv), &gv) in before[input.0].iter_mut().zip(s).zip(g) {
                        *d += (sv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                Op::ElemwiseMul { a, b } => {
                    let sa = self.nodes[a.0].value.shape();
                    let broadcast = sa.len() == 3 && self.nodes[b.0].value.ndim() == 2;
                    let xa = self.nodes[a.0].value.data();
                    let xb = self.nodes[b.0].value.data();
                    if broadcast {
                        let c = sa[2];
                        {
                            let da = &mut before[a.0];
                            for (idx, &gv) in g.iter().enumerate() {
                                da[idx] += gv * xb[idx / c];
                            }
                        }
                        let db = &mut before[b.0];
                        for (idx, &gv) in g.iter().enumerate() {
                            db[idx / c] += gv * xa[idx];
                        }
                    } else {
                        {
                            let da = &mut before[a.0];
                            for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(xb) {
                                *d += gv * bv;
                            }
                        }
                        let db = &mut before[b.0];
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(xa) {
                            *d += gv * av;
                        }
                    }
                }
                Op::ReduceMean { input } => {
                    let n = self.nodes[input.0].value.numel() as f32;
                    let gv = g[0] / n;
                    for d in before[input.0].iter_mut() {
                        *d += gv;
                    }
                }
                Op::ReduceMax { input, argmax } => {
                    before[input.0][*argmax as usize] += g[0];
                }
                Op::GlobalAvgPool { input } => {
                    let s = self.nodes[input.0].value.shape();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let inv = 1.0 / (h * w) as f32;
                    let dst = &mut before[input.0];
                    for px in 0..h * w {
                        for ch in 0..c {
                            dst[px * c + ch] += g[ch] * inv;
                        }
                    }
                }
                Op::Add { a, b } => {
                    if a == b {
                        for (d, &gv) in before[a.0].iter_mut().zip(g) {
                            *d += 2.0 * gv;
                        }
                    } else {
                        for (d, &gv) in before[a.0].iter_mut().zip(g) {
                            *d += gv;
                        }
                        for (d, &gv) in before[b.0].iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    for (d, &gv) in before[input.0].iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
                Op::AddConst { input } => {
                    for (d, &gv) in before[input.0].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                Op::Abs { input } => {
                    let x = self.nodes[input.0].value.data();
                    for ((d, &xv), &gv) in before[input.0].iter_mut().zip(x).zip(g) {
                        *d += gv * sign(xv);
                    }
                }
                Op::Reshape { input } => {
                    for (d, &gv) in before[input.0].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                Op::AffineSpan { alpha, basis, .. } => {
                    let n = basis.shape()[1];
                    let bd = basis.data();
                    let da = &mut before[alpha.0];
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for (row, &gv) in g.iter().enumerate() {
                            acc += bd[row * n + j] as f64 * gv as f64;
                        }
                        da[j] += acc as f32;
                    }
                }
                Op::CrossEntropy { logits, label } => {
                    let x = self.nodes[logits.0].value.data();
                    let m = x.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
                    let exps: Vec<f64> = x.iter().map(|&v| ((v as f64) - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let gv = g[0] as f64;
                    for (j, d) in before[logits.0].iter_mut().enumerate() {
                        let soft = exps[j] / sum;
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *d += (gv * (soft - onehot)) as f32;
                    }
                }
                Op::L1ToTarget { input, target } => {
                    let x = self.nodes[input.0].value.data();
                    let inv = 1.0 / x.len() as f32;
                    let gv = g[0];
                    for ((d, &xv), &tv) in
                        before[input.0].iter_mut().zip(x).zip(target.data())
                    {
                        *d += gv * inv * sign(xv - tv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_assign(dst: &mut [f32], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s as f32;
    }
}

/// Max relative error between analytic gradients and central finite
/// differences, over up to `coords_per_param` sampled coordinates of each
/// parameter. The error measure is |analytic - numeric| / max(1, |numeric|).
///
/// Points within ~eps of a relu/maxpool kink are not meaningful to check
/// (the derivative jumps); callers use seeds that keep sampled inputs away
/// from kinks.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    eps: f32,
    coords_per_param: usize,
    rng: &mut Pcg32,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::usage("grad_check: builder must return a scalar"));
        }
        Ok((tape, ids, loss))
    };

    let (mut tape, ids, loss) = run(params)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let numel = param.numel();
        let coords: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(numel)).collect()
        };
        for ci in coords {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let (tape_p, _, loss_p) = run(&plus)?;
            let lp = tape_p.value(loss_p).item() as f64;

            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let (tape_m, _, loss_m) = run(&minus)?;
            let lm = tape_m.value(loss_m).item() as f64;

            let numeric = (lp - lm) / (2.0 * eps as f64);
            let a = analytic[pi][ci] as f64;
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
