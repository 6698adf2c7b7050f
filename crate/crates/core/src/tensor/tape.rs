//! Define-by-run gradient tape.
//!
//! A [`Tape`] records every operation as it executes; nodes are stored in
//! execution order, so the list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//! The tape is rebuilt for every forward pass and confined to one thread.

use super::kernels;
use super::{Scalar, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Silu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis_len: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    UpsampleNearest2 {
        a: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as an input node. Its `requires_grad` flag decides
    /// whether backward will produce a gradient for it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires)
    }

    /// Registers `t` as a non-differentiable input.
    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v` from the last backward pass, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Extracts a leaf's tensor, with `grad` populated when backward ran.
    pub fn take_tensor(&mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[1]))
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ── Forward operations ──────────────────────────────────────────

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dims {ka} vs {kb}"),
            ));
        }
        let out = kernels::matmul_alloc(self.value(a).data(), self.value(b).data(), m, ka, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MatMul { a, b }, req))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let t = Tensor::from_vec(vec![c, r], out)?;
        let req = self.requires(a);
        Ok(self.push(t, Op::Transpose { a }, req))
    }

    /// Elementwise sum. `b` may also be a trailing-suffix shape of `a`
    /// (e.g. `[s, d] + [d]`), in which case it is broadcast over the
    /// leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        if !(ashape == bshape || ashape.ends_with(bshape)) {
            return Err(TensorError::shape(
                "add",
                format!("{ashape:?} + {bshape:?} is not a trailing broadcast"),
            ));
        }
        let bn = self.value(b).numel();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, &bv) in chunk.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let t = Tensor::from_vec(ashape.to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Mul { a, b }, req))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = S::from_f64(factor);
        let t = self.value(a).map(|x| x * f);
        let req = self.requires(a);
        self.push(t, Op::Scale { a, factor }, req)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * kernels::sigmoid(x));
        let req = self.requires(a);
        self.push(t, Op::Silu { a }, req)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        let shape = self.value(a).shape().to_vec();
        let axis_len = *shape.last().ok_or(TensorError::EmptyAxis)?;
        if axis_len == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let mut out = vec![S::zero(); self.value(a).numel()];
        kernels::softmax_rows(self.value(a).data(), axis_len, &mut out);
        let t = Tensor::from_vec(shape, out)?;
        let req = self.requires(a);
        Ok(self.push(t, Op::Softmax { a, axis_len }, req))
    }

    /// Cross-correlation of `x[b,c,h,w]` with `w[o,c,k,k]` plus per-channel
    /// bias, square odd kernel. No kernel flip.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        let (o, cw, k, k2) = self.value(w).dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel must be square and odd, got {k}x{k2}"),
            ));
        }
        if cw != c {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {cw}"),
            ));
        }
        if self.value(bias).shape() != [o] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{o}]", self.value(bias).shape()),
            ));
        }
        let oh = kernels::conv_out_extent(h, k, stride, pad);
        let ow = kernels::conv_out_extent(wd, k, stride, pad);
        let ckk = c * k * k;
        let mut out = vec![S::zero(); b * o * oh * ow];
        let mut cols = vec![S::zero(); ckk * oh * ow];
        for bi in 0..b {
            let xb = &self.value(x).data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            kernels::im2col(xb, c, h, wd, k, stride, pad, &mut cols);
            let out_b = &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow];
            kernels::matmul(self.value(w).data(), &cols, o, ckk, oh * ow, out_b);
            for (oc, chunk) in out_b.chunks_exact_mut(oh * ow).enumerate() {
                let bv = self.value(bias).data()[oc];
                for v in chunk.iter_mut() {
                    *v += bv;
                }
            }
        }
        let t = Tensor::from_vec(vec![b, o, oh, ow], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            req,
        ))
    }

    /// Group normalization with learned per-channel scale and shift.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> TensorResult<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Divisibility {
                channels: c,
                groups,
            });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::shape(
                "group_norm",
                format!("scale/shift must be [{c}]"),
            ));
        }
        let hw = h * w;
        let (mean, var) = kernels::group_stats(self.value(x).data(), b, c, hw, groups);
        let cg = c / groups;
        let epss = S::from_f64(eps);
        let mut out = vec![S::zero(); b * c * hw];
        for bi in 0..b {
            for ch in 0..c {
                let g = ch / cg;
                let m = mean[bi * groups + g];
                let inv = (var[bi * groups + g] + epss).sqrt().recip();
                let ga = self.value(gamma).data()[ch];
                let be = self.value(beta).data()[ch];
                let src = &self.value(x).data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                let dst = &mut out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - m) * inv * ga + be;
                }
            }
        }
        let t = Tensor::from_vec(vec![b, c, h, w], out)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            req,
        ))
    }

    /// Stacks `[l_i, d]` parts along the row axis, order preserved.
    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let (_, d) = self.value(parts[0]).dims2()?;
        let mut rows = 0usize;
        for &p in parts {
            let (l, dp) = self.value(p).dims2()?;
            if dp != d {
                return Err(TensorError::shape(
                    "concat_rows",
                    format!("column widths differ: {d} vs {dp}"),
                ));
            }
            rows += l;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(vec![rows, d], out)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Concatenates `[b,c1,h,w]` and `[b,c2,h,w]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::shape(
                "concat_channels",
                format!("incompatible {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a).data()[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::from_vec(vec![ba, ca + cb, ha, wa], out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::ConcatChannels { a, b }, req))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = S::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = S::from_f64(self.value(a).numel() as f64);
        let mut s = S::zero();
        for &v in self.value(a).data() {
            s += v;
        }
        let req = self.requires(a);
        self.push(Tensor::scalar(s / n), Op::MeanAll { a }, req)
    }

    /// Row mean of `[l, d]`, producing `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> TensorResult<Var> {
        let (l, d) = self.value(a).dims2()?;
        let inv = S::from_f64(1.0 / l as f64);
        let mut out = vec![S::zero(); d];
        for row in self.value(a).data().chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let t = Tensor::from_vec(vec![d], out)?;
        let req = self.requires(a);
        Ok(self.push(t, Op::MeanRows { a }, req))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> TensorResult<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.value(a).shape(), shape),
            ));
        }
        let t = Tensor::from_vec(shape, self.value(a).data().to_vec())?;
        let req = self.requires(a);
        Ok(self.push(t, Op::Reshape { a }, req))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[b,c,h,w]`.
    pub fn upsample_nearest2(&mut self, a: Var) -> TensorResult<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let mut out = vec![S::zero(); b * c * 4 * h * w];
        let src = self.value(a).data();
        for plane in 0..b * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = sp[i * w + j];
                    let base = (2 * i) * 2 * w + 2 * j;
                    dp[base] = v;
                    dp[base + 1] = v;
                    dp[base + 2 * w] = v;
                    dp[base + 2 * w + 1] = v;
                }
            }
        }
        let t = Tensor::from_vec(vec![b, c, 2 * h, 2 * w], out)?;
        let req = self.requires(a);
        Ok(self.push(t, Op::UpsampleNearest2 { a }, req))
    }

    /// Adds a `[c]` bias across the channel axis of `[b,c,h,w]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(bias).shape() != [c] {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias shape {:?}, expected [{c}]", self.value(bias).shape()),
            ));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let bv = self.value(bias).data()[ch];
                for v in out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter_mut() {
                    *v += bv;
                }
            }
        }
        let t = Tensor::from_vec(vec![b, c, h, w], out)?;
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(t, Op::AddChannelBias { x, bias }, req))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every
    /// `requires_grad` leaf (zeros when the leaf is unreachable from the
    /// loss). Resets previous gradients first, so repeated calls on the
    /// same tape are idempotent and bit-identical.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }

        for i in 0..self.nodes.len() {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let buf = match &self.grads[i] {
                    Some(g) => g.clone(),
                    None => vec![S::zero(); node.value.numel()],
                };
                node.value.grad = Some(buf);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<S>) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // Destructure copies of the op metadata up front; the grads vector
        // is the only thing mutated below.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if self.requires(a) {
                    let bt = kernels::transpose(self.value(b).data(), k, n);
                    let da = kernels::matmul_alloc(g, &bt, m, n, k);
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let at = kernels::transpose(self.value(a).data(), m, k);
                    let db = kernels::matmul_alloc(&at, g, k, m, n);
                    self.accumulate(b, db);
                }
            }
            &Op::Transpose { a } => {
                if self.requires(a) {
                    let (r, c) = self.value(a).dims2().unwrap();
                    // g has shape [c, r]; transpose it back.
                    self.accumulate(a, kernels::transpose(g, c, r));
                }
            }
            &Op::Add { a, b } => {
                if self.requires(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.requires(b) {
                    let bn = self.value(b).numel();
                    let mut db = vec![S::zero(); bn];
                    for chunk in g.chunks_exact(bn) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            &Op::Sub { a, b } => {
                if self.requires(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.requires(b) {
                    self.accumulate(b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let db: Vec<S> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, db);
                }
            }
            &Op::Scale { a, factor } => {
                if self.requires(a) {
                    let f = S::from_f64(factor);
                    self.accumulate(a, g.iter().map(|&x| x * f).collect());
                }
            }
            &Op::Silu { a } => {
                if self.requires(a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &x)| {
                            let s = kernels::sigmoid(x);
                            gv * s * (S::one() + x * (S::one() - s))
                        })
                        .collect();
                    self.accumulate(a, da);
                }
            }
            &Op::Softmax { a, axis_len } => {
                if self.requires(a) {
                    let out = self.nodes[i].value.data();
                    let mut da = vec![S::zero(); out.len()];
                    for ((orow, grow), drow) in out
                        .chunks_exact(axis_len)
                        .zip(g.chunks_exact(axis_len))
                        .zip(da.chunks_exact_mut(axis_len))
                    {
                        let mut dot = S::zero();
                        for (&o, &gv) in orow.iter().zip(grow) {
                            dot += o * gv;
                        }
                        for ((d, &o), &gv) in drow.iter_mut().zip(orow).zip(grow) {
                            *d = o * (gv - dot);
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(i, g, x, w, bias, stride, pad),
            &Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => self.group_norm_backward(g, x, gamma, beta, groups, eps),
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let n = self.value(p).numel();
                    if self.requires(p) {
                        self.accumulate(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::ConcatChannels { a, b } => {
                let (ba, ca, h, w) = self.value(a).dims4().unwrap();
                let cb = self.value(b).shape()[1];
                let hw = h * w;
                if self.requires(a) {
                    let mut da = Vec::with_capacity(ba * ca * hw);
                    for bi in 0..ba {
                        let base = bi * (ca + cb) * hw;
                        da.extend_from_slice(&g[base..base + ca * hw]);
                    }
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let mut db = Vec::with_capacity(ba * cb * hw);
                    for bi in 0..ba {
                        let base = bi * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&g[base..base + cb * hw]);
                    }
                    self.accumulate(b, db);
                }
            }
            &Op::SumAll { a } => {
                if self.requires(a) {
                    self.accumulate(a, vec![g[0]; self.value(a).numel()]);
                }
            }
            &Op::MeanAll { a } => {
                if self.requires(a) {
                    let n = self.value(a).numel();
                    let gv = g[0] / S::from_f64(n as f64);
                    self.accumulate(a, vec![gv; n]);
                }
            }
            &Op::MeanRows { a } => {
                if self.requires(a) {
                    let (l, d) = self.value(a).dims2().unwrap();
                    let inv = S::from_f64(1.0 / l as f64);
                    let mut da = Vec::with_capacity(l * d);
                    for _ in 0..l {
                        da.extend(g.iter().map(|&x| x * inv));
                    }
                    self.accumulate(a, da);
                }
            }
            &Op::Reshape { a } => {
                if self.requires(a) {
                    self.accumulate(a, g.to_vec());
                }
            }
            &Op::UpsampleNearest2 { a } => {
                if self.requires(a) {
                    let (b, c, h, w) = self.value(a).dims4().unwrap();
                    let mut da = vec![S::zero(); b * c * h * w];
                    for plane in 0..b * c {
                        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dp = &mut da[plane * h * w..(plane + 1) * h * w];
                        for i2 in 0..h {
                            for j in 0..w {
                                let base = (2 * i2) * 2 * w + 2 * j;
                                dp[i2 * w + j] =
                                    gp[base] + gp[base + 1] + gp[base + 2 * w] + gp[base + 2 * w + 1];
                            }
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            &Op::AddChannelBias { x, bias } => {
                if self.requires(x) {
                    self.accumulate(x, g.to_vec());
                }
                if self.requires(bias) {
                    let (b, c, h, w) = self.value(x).dims4().unwrap();
                    let hw = h * w;
                    let mut db = vec![S::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let mut s = S::zero();
                            for &gv in &g[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                                s += gv;
                            }
                            db[ch] += s;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        _node: usize,
        g: &[S],
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) {
        let (b, c, h, wd) = self.value(x).dims4().unwrap();
        let (o, _, k, _) = self.value(w).dims4().unwrap();
        let oh = kernels::conv_out_extent(h, k, stride, pad);
        let ow = kernels::conv_out_extent(wd, k, stride, pad);
        let ckk = c * k * k;
        let need_x = self.requires(x);
        let need_w = self.requires(w);
        let need_b = self.requires(bias);

        let mut dw = if need_w {
            vec![S::zero(); o * ckk]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![S::zero(); b * c * h * wd]
        } else {
            Vec::new()
        };
        let mut db = if need_b { vec![S::zero(); o] } else { Vec::new() };

        let mut cols = vec![S::zero(); ckk * oh * ow];
        let wt = if need_x {
            kernels::transpose(self.value(w).data(), o, ckk)
        } else {
            Vec::new()
        };
        for bi in 0..b {
            let gb = &g[bi * o * oh * ow..(bi + 1) * o * oh * ow];
            if need_w || need_x {
                let xb = &self.value(x).data()[bi * c * h * wd..(bi + 1) * c * h * wd];
                kernels::im2col(xb, c, h, wd, k, stride, pad, &mut cols);
            }
            if need_w {
                // dw += g_b [o, ohw] * cols^T [ohw, ckk]
                let colst = kernels::transpose(&cols, ckk, oh * ow);
                kernels::matmul(gb, &colst, o, oh * ow, ckk, &mut dw);
            }
            if need_x {
                let dcols = kernels::matmul_alloc(&wt, gb, ckk, o, oh * ow);
                kernels::col2im_add(
                    &dcols,
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd],
                );
            }
            if need_b {
                for (oc, chunk) in gb.chunks_exact(oh * ow).enumerate() {
                    let mut s = S::zero();
                    for &gv in chunk {
                        s += gv;
                    }
                    db[oc] += s;
                }
            }
        }
        if need_w {
            self.accumulate(w, dw);
        }
        if need_x {
            self.accumulate(x, dx);
        }
        if need_b {
            self.accumulate(bias, db);
        }
    }

    fn group_norm_backward(&mut self, g: &[S], x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) {
        let (b, c, h, w) = self.value(x).dims4().unwrap();
        let hw = h * w;
        let cg = c / groups;
        let m = S::from_f64((cg * hw) as f64);
        let epss = S::from_f64(eps);
        let (mean, var) = kernels::group_stats(self.value(x).data(), b, c, hw, groups);

        let need_x = self.requires(x);
        let need_g = self.requires(gamma);
        let need_b = self.requires(beta);

        let mut dx = if need_x {
            vec![S::zero(); b * c * hw]
        } else {
            Vec::new()
        };
        let mut dgamma = if need_g { vec![S::zero(); c] } else { Vec::new() };
        let mut dbeta = if need_b { vec![S::zero(); c] } else { Vec::new() };

        for bi in 0..b {
            for gi in 0..groups {
                let mu = mean[bi * groups + gi];
                let inv = (var[bi * groups + gi] + epss).sqrt().recip();
                let start = (bi * c + gi * cg) * hw;
                let xs = &self.value(x).data()[start..start + cg * hw];
                let gs = &g[start..start + cg * hw];

                // dxhat_j = g_j * gamma(channel of j)
                // dx follows the usual normalization backward within the group.
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let ga = self.value(gamma).data()[ch];
                    for j in 0..hw {
                        let idx = ci * hw + j;
                        let xhat = (xs[idx] - mu) * inv;
                        let dxhat = gs[idx] * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if need_g {
                            dgamma[ch] += gs[idx] * xhat;
                        }
                        if need_b {
                            dbeta[ch] += gs[idx];
                        }
                    }
                }
                if need_x {
                    let dxs = &mut dx[start..start + cg * hw];
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let ga = self.value(gamma).data()[ch];
                        for j in 0..hw {
                            let idx = ci * hw + j;
                            let xhat = (xs[idx] - mu) * inv;
                            let dxhat = gs[idx] * ga;
                            dxs[idx] = inv * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(x, dx);
        }
        if need_g {
            self.accumulate(gamma, dgamma);
        }
        if need_b {
            self.accumulate(beta, dbeta);
        }
    }
}
