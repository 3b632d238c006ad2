//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its value. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for backpropagation.
//!
//! Trainable inputs are registered with [`Graph::param`]; everything else is a
//! constant. [`Graph::detach`] is the stop-gradient: its output carries the same
//! value but no gradient ever flows back through it, so a parameter reachable
//! only through detached paths receives an exact zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    Silu(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::Detach => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::AddBias(a, b) | Op::AddChannelBias(a, b) | Op::ScaleChannels(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => {
                self.rg(*x) || self.rg(*w)
            }
            Op::Scale(a, _)
            | Op::ScaleRows(a, _)
            | Op::Silu(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Reshape(a) => self.rg(*a),
            Op::Concat(parts) => parts.iter().any(|p| self.rg(*p)),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        self.params.push((name.to_string(), v));
        v
    }

    /// Stop-gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// Multiplies batch item `i` of `a` by the constant `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: &[f64]) -> Result<Var> {
        let v = self.value(a).scale_rows(coeffs)?;
        Ok(self.push(v, Op::ScaleRows(a, coeffs.to_vec())))
    }

    /// `[B,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `[B,C,...] + [C]`, broadcasting over batch and trailing axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() < 2 || sb.len() != 1 || sa[1] != sb[0] {
            return dim_err(format!("add_bias {sa:?} + {sb:?}"));
        }
        let inner: usize = sa[2..].iter().product();
        let c = sa[1];
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// `[B,C,...] + [B,C]`, broadcasting over trailing axes.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() < 2 || sb.len() != 2 || sa[0] != sb[0] || sa[1] != sb[1] {
            return dim_err(format!("add_channel_bias {sa:?} + {sb:?}"));
        }
        let inner: usize = sa[2..].iter().product();
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i / inner];
        }
        Ok(self.push(out, Op::AddChannelBias(a, bias)))
    }

    /// `[B,C,...] * [B,C]`, broadcasting over trailing axes.
    pub fn scale_channels(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.value(a).shape(), self.value(s).shape());
        if sa.len() < 2 || ss.len() != 2 || sa[0] != ss[0] || sa[1] != ss[1] {
            return dim_err(format!("scale_channels {sa:?} * {ss:?}"));
        }
        let inner: usize = sa[2..].iter().product();
        let mut out = self.value(a).clone();
        let f = self.value(s).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= f[i / inner];
        }
        Ok(self.push(out, Op::ScaleChannels(a, s)))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Concatenation along axis 1 (features or channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return dim_err(format!("concat needs rank >= 2, got {first:?}"));
        }
        let batch = first[0];
        let tail = &first[2..];
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len() || s[0] != batch || &s[2..] != tail {
                return dim_err(format!("concat {first:?} with {s:?}"));
            }
            channels += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
            }
        }
        let mut shape = vec![batch, channels];
        shape.extend_from_slice(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    fn conv_geoms(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<(ConvGeom, usize, usize)> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || stride == 0 {
            return dim_err(format!("conv input {sx:?} weight {sw:?} stride {stride}"));
        }
        let k = sw[2];
        if transpose {
            // weight [Ci, Co, k, k]; geometry describes the *output* image.
            if sx[1] != sw[0] {
                return dim_err(format!("conv_transpose channels {sx:?} vs {sw:?}"));
            }
            let (h, wd) = (sx[2], sx[3]);
            let ho = (h - 1) * stride + k;
            let wo = (wd - 1) * stride + k;
            if ho < 2 * pad + 1 || wo < 2 * pad + 1 {
                return dim_err("conv_transpose padding too large".into());
            }
            let geom = ConvGeom {
                channels: sw[1],
                height: ho - 2 * pad,
                width: wo - 2 * pad,
                kernel: k,
                stride,
                pad,
            };
            if geom.out_height() != h || geom.out_width() != wd {
                return dim_err("inconsistent conv_transpose geometry".into());
            }
            Ok((geom, sw[0], sw[1]))
        } else {
            if sx[1] != sw[1] {
                return dim_err(format!("conv channels {sx:?} vs {sw:?}"));
            }
            if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
                return dim_err(format!("kernel {k} larger than padded input {sx:?}"));
            }
            let geom = ConvGeom { channels: sx[1], height: sx[2], width: sx[3], kernel: k, stride, pad };
            Ok((geom, sw[1], sw[0]))
        }
    }

    /// 2-D convolution; `x: [B,Ci,H,W]`, `w: [Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (geom, _ci, co) = self.conv_geoms(x, w, stride, pad, false)?;
        let batch = self.value(x).shape()[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; batch * co * cols_n];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let img_len = geom.channels * geom.height * geom.width;
        for b in 0..batch {
            geom.im2col(&xv[b * img_len..(b + 1) * img_len], &mut cols);
            gemm_nn(co, rows, cols_n, wv, &cols, &mut out[b * co * cols_n..(b + 1) * co * cols_n], false);
        }
        let shape = vec![batch, co, geom.out_height(), geom.out_width()];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, stride, pad }))
    }

    /// Transposed 2-D convolution; `x: [B,Ci,H,W]`, `w: [Ci,Co,k,k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (geom, ci, co) = self.conv_geoms(x, w, stride, pad, true)?;
        let batch = self.value(x).shape()[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let out_len = co * geom.height * geom.width;
        let mut out = vec![0.0; batch * out_len];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..batch {
            gemm_tn(rows, ci, cols_n, wv, &xv[b * ci * cols_n..(b + 1) * ci * cols_n], &mut cols, false);
            geom.col2im(&cols, &mut out[b * out_len..(b + 1) * out_len]);
        }
        let shape = vec![batch, co, geom.height, geom.width];
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConvTranspose2d { x, w, stride, pad }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::ScaleRows(a, c) => self.accumulate(grads, *a, g.scale_rows(c)?),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), vb.data(), &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, va.data(), g.data(), &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let s = out.shape();
                    let inner: usize = s[2..].iter().product();
                    let c = s[1];
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::AddChannelBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let s = out.shape();
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![0.0; s[0] * s[1]];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i / inner] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![s[0], s[1]], db));
                }
            }
            Op::ScaleChannels(a, s) => {
                let shape = out.shape();
                let inner: usize = shape[2..].iter().product();
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                if self.rg(*a) {
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        *v *= sv[i / inner];
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*s) {
                    let mut ds = vec![0.0; shape[0] * shape[1]];
                    for (i, (gv, x)) in g.data().iter().zip(av).enumerate() {
                        ds[i / inner] += gv * x;
                    }
                    self.accumulate(grads, *s, Tensor::from_parts(vec![shape[0], shape[1]], ds));
                }
            }
            Op::Silu(a) => {
                let d = self.value(*a).zip_map(g, |x, gv| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = self.value(*a).zip_map(g, |x, gv| 2.0 * x * gv)?;
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = self.value(*a).zip_map(g, |x, gv| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let k = g.item() / va.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(va.shape(), k));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(va.shape(), g.item()));
            }
            Op::Concat(parts) => {
                let s = out.shape();
                let inner: usize = s[2..].iter().product();
                let batch = s[0];
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let n = ps[1] * inner;
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(batch * n);
                        for b in 0..batch {
                            let start = b * s[1] * inner + offset;
                            d.extend_from_slice(&g.data()[start..start + n]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(ps, d));
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (geom, _ci, co) = self.conv_geoms(*x, *w, *stride, *pad, false)?;
                let batch = self.value(*x).shape()[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let img_len = geom.channels * geom.height * geom.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![0.0; rows * cols_n];
                let mut dw = vec![0.0; co * rows];
                let mut dx = vec![0.0; batch * img_len];
                let mut dcols = vec![0.0; rows * cols_n];
                for b in 0..batch {
                    let gb = &g.data()[b * co * cols_n..(b + 1) * co * cols_n];
                    if self.rg(*w) {
                        geom.im2col(&xv[b * img_len..(b + 1) * img_len], &mut cols);
                        gemm_nt(co, cols_n, rows, gb, &cols, &mut dw, true);
                    }
                    if self.rg(*x) {
                        gemm_tn(rows, co, cols_n, wv, gb, &mut dcols, false);
                        geom.col2im(&dcols, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                }
                if self.rg(*w) {
                    let s = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_parts(s, dw));
                }
                if self.rg(*x) {
                    let s = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(s, dx));
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (geom, ci, co) = self.conv_geoms(*x, *w, *stride, *pad, true)?;
                let batch = self.value(*x).shape()[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let out_len = co * geom.height * geom.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gcols = vec![0.0; rows * cols_n];
                let mut dw = vec![0.0; ci * rows];
                let mut dx = vec![0.0; batch * ci * cols_n];
                for b in 0..batch {
                    geom.im2col(&g.data()[b * out_len..(b + 1) * out_len], &mut gcols);
                    let xb = &xv[b * ci * cols_n..(b + 1) * ci * cols_n];
                    if self.rg(*w) {
                        gemm_nt(ci, cols_n, rows, xb, &gcols, &mut dw, true);
                    }
                    if self.rg(*x) {
                        gemm_nn(ci, rows, cols_n, wv, &gcols, &mut dx[b * ci * cols_n..(b + 1) * ci * cols_n], false);
                    }
                }
                if self.rg(*w) {
                    let s = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_parts(s, dw));
                }
                if self.rg(*x) {
                    let s = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(s, dx));
                }
            }
        }
        Ok(())
    }

    /// Gradient for every registered parameter, zero-filled where the loss does
    /// not depend on it. Parameters registered more than once are summed.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            match out.get_mut(name) {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += d;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0));
        let y = g.square(w);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        // loss = (SG[w] - w)^2: value 0, gradient through live branch -2 (SG[w]-w) = 0
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(1.7));
        let sg = g.detach(w);
        let d = g.sub(sg, w).unwrap();
        let l = g.square(d);
        let grads = g.backward(l).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(grads.get(w).unwrap().item(), 0.0);

        // a parameter used only inside the bracket gets no gradient at all
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(2.0));
        let b = g.param("b", Tensor::scalar(0.5));
        let sb = g.detach(b);
        let d = g.sub(a, sb).unwrap();
        let l = g.square(d);
        let grads = g.backward(l).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg["a"].item(), 3.0);
        assert_eq!(pg["b"].item(), 0.0);
    }

    fn finite_diff_check(build: impl Fn(&mut Graph, &[Tensor]) -> Var, inputs: Vec<Tensor>) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            for (i, v) in vals.iter().enumerate() {
                g.param(&format!("p{i}"), v.clone());
            }
            let l = build(&mut g, vals);
            (g.value(l).item(), g)
        };
        let (_, g0) = eval(&inputs);
        let loss_var = Var(g0.len() - 1);
        let grads = g0.backward(loss_var).unwrap();
        let pg = g0.param_grads(&grads);
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            for j in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = pg[&format!("p{i}")].data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel < 1e-6, "input {i} elem {j}: fd {fd} analytic {an}");
            }
        }
    }

    // Inside the closures parameters are the first nodes, in order.
    fn p(i: usize) -> Var {
        Var(i)
    }

    #[test]
    fn matmul_bias_silu_matches_finite_differences() {
        finite_diff_check(
            |g, _| {
                let h = g.matmul(p(0), p(1)).unwrap();
                let h = g.add_bias(h, p(2)).unwrap();
                let h = g.silu(h);
                let s = g.square(h);
                g.mean(s)
            },
            vec![
                t(&[3, 4], |i| (i as f64 * 0.37).sin()),
                t(&[4, 2], |i| (i as f64 * 0.71).cos()),
                t(&[2], |i| 0.1 * i as f64 - 0.05),
            ],
        );
    }

    #[test]
    fn concat_rows_and_abs_match_finite_differences() {
        finite_diff_check(
            |g, _| {
                let c = g.concat(&[p(0), p(1)]).unwrap();
                let r = g.scale_rows(c, &[0.5, -2.0]).unwrap();
                let m = g.mul(r, c).unwrap();
                let a = g.abs(m);
                let s = g.scale(a, 3.0);
                g.sum(s)
            },
            vec![t(&[2, 3], |i| i as f64 * 0.3 + 0.1), t(&[2, 2], |i| -(i as f64) * 0.2 - 0.15)],
        );
    }

    #[test]
    fn conv_and_transpose_match_finite_differences() {
        finite_diff_check(
            |g, _| {
                let h = g.conv2d(p(0), p(1), 2, 1).unwrap();
                let h = g.add_channel_bias(h, p(3)).unwrap();
                let h = g.silu(h);
                let o = g.conv_transpose2d(h, p(2), 2, 0).unwrap();
                let sq = g.square(o);
                g.mean(sq)
            },
            vec![
                t(&[2, 2, 5, 5], |i| ((i * 13) % 17) as f64 / 17.0 - 0.5),
                t(&[3, 2, 3, 3], |i| ((i * 7) % 11) as f64 / 11.0 - 0.4),
                t(&[3, 1, 2, 2], |i| ((i * 5) % 7) as f64 / 7.0 - 0.3),
                t(&[2, 3], |i| 0.1 * i as f64),
            ],
        );
    }

    #[test]
    fn scale_channels_matches_finite_differences() {
        finite_diff_check(
            |g, _| {
                let h = g.scale_channels(p(0), p(1)).unwrap();
                let s = g.square(h);
                g.mean(s)
            },
            vec![t(&[2, 3, 2, 2], |i| (i as f64 * 0.43).sin()), t(&[2, 3], |i| 0.3 * i as f64 - 0.7)],
        );
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, conv_t(y, w)>
        let x = t(&[1, 2, 6, 6], |i| ((i * 31) % 19) as f64 - 9.0);
        let w = t(&[3, 2, 2, 2], |i| ((i * 7) % 5) as f64 - 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let cx = g.conv2d(xv, wv, 2, 0).unwrap();
        let y = t(g.value(cx).shape(), |i| ((i * 3) % 7) as f64 - 3.0);
        let lhs = g.value(cx).dot(&y).unwrap();
        // conv_transpose weight layout [Ci=3 (y channels), Co=2, k, k] is the same buffer
        let yv = g.constant(y);
        let ct = g.conv_transpose2d(yv, wv, 2, 0).unwrap();
        let rhs = g.value(ct).dot(&x).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
