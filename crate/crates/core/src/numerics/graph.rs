//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Leaves either
//! own their tensor or borrow it (model parameters are borrowed so a
//! per-sample graph never copies weights). [`Graph::backward`] walks the tape
//! once in reverse and returns gradients for every leaf that requires them.
//!
//! Inference graphs (`Graph::inference`) skip recording entirely; values are
//! computed by the same kernels, so tracked and untracked forwards agree bit
//! for bit.

use super::kernels::{self, View, ViewMut};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Axpy(Var, Var, T),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AttnProbs {
        q: Var,
        k: Var,
        heads: usize,
        scale: T,
    },
    AttnApply {
        p: Var,
        v: Var,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    track: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn leaf(&mut self, value: Value<'a, T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Value::Borrowed(t), false)
    }

    /// Owned leaf, optionally differentiated.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(Value::Owned(t), requires_grad)
    }

    /// Borrowed leaf, optionally differentiated.
    pub fn param(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(Value::Borrowed(t), requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = kernels::matmul(self.value(a), ta, self.value(b), tb)?;
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds `b [n]` to every length-`n` row of `x`.
    /// `x + alpha·y`. Where `alpha·y` is exactly zero the element of `x` is
    /// passed through untouched, so a vanishing branch leaves `x` bit-identical
    /// (including the sign of zero).
    pub fn axpy(&mut self, x: Var, y: Var, alpha: T) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let out = xv.zip_map(yv, |a, b| {
            let t = alpha * b;
            if t == T::zero() {
                a
            } else {
                a + t
            }
        })?;
        self.push(out, Op::Axpy(x, y, alpha), &[x, y])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.numel();
        if xv.shape().last() != Some(&n) || bv.rank() != 1 {
            return shape_err(format!(
                "row bias {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRowBias(x, b), &[x, b])
    }

    /// Adds `b [c]` to every element of channel `c` of `x [c, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.numel();
        if xv.shape().first() != Some(&c) || bv.rank() != 1 {
            return shape_err(format!(
                "channel bias {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let per = xv.numel() / c.max(1);
        let mut out = xv.clone();
        for (chunk, &bb) in out.data_mut().chunks_mut(per.max(1)).zip(bv.data()) {
            for o in chunk {
                *o += bb;
            }
        }
        self.push(out, Op::AddChannelBias(x, b), &[x, b])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.dims2()?;
        let mut out = xv.clone();
        kernels::softmax_rows_in_place(out.data_mut(), cols);
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = *xv.shape().last().unwrap_or(&0);
        if n == 0 || gv.shape() != [n] || bv.shape() != [n] {
            return shape_err(format!(
                "layer norm affine {:?}/{:?} does not match {:?}",
                gv.shape(),
                bv.shape(),
                xv.shape()
            ));
        }
        let (xhat, inv_std) = kernels::normalize_blocks(xv.data(), n, eps);
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(n) {
            for ((&h, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                out.push(g * h + b);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if self.track { xhat } else { Vec::new() },
            inv_std,
        };
        self.push(out, op, &[x, gamma, beta])
    }

    /// Group normalization of `x [c, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: T,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape().first().unwrap_or(&0);
        if groups == 0 || c % groups != 0 || gv.shape() != [c] || bv.shape() != [c] {
            return shape_err(format!(
                "group norm over {:?} with {groups} groups and affine {:?}",
                xv.shape(),
                gv.shape()
            ));
        }
        let per_channel = xv.numel() / c;
        let block = per_channel * (c / groups);
        let (xhat, inv_std) = kernels::normalize_blocks(xv.data(), block, eps);
        let mut out = xhat.clone();
        for (ci, chunk) in out.chunks_mut(per_channel).enumerate() {
            let (g, b) = (gv.data()[ci], bv.data()[ci]);
            for o in chunk {
                *o = g * *o + b;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat: if self.track { xhat } else { Vec::new() },
            inv_std,
        };
        self.push(out, op, &[x, gamma, beta])
    }

    /// 2-D convolution of `x [cin, h, w]` with `w [cout, cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, h, wd) = match xv.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => return shape_err(format!("conv input must be [c,h,w], got {:?}", xv.shape())),
        };
        let (cout, k) = match wv.shape()[..] {
            [o, i, k1, k2] if i == cin && k1 == k2 => (o, k1),
            _ => {
                return shape_err(format!(
                    "conv weight {:?} incompatible with input {:?}",
                    wv.shape(),
                    xv.shape()
                ))
            }
        };
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return shape_err("convolution kernel larger than padded input");
        }
        let ho = kernels::conv_out(h, k, stride, pad);
        let wo = kernels::conv_out(wd, k, stride, pad);
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols_owned;
        let cols: &[T] = if direct {
            xv.data()
        } else {
            cols_owned = kernels::im2col(xv.data(), (cin, h, wd), k, stride, pad);
            &cols_owned
        };
        let kk = cin * k * k;
        let mut out = vec![T::zero(); cout * ho * wo];
        kernels::gemm(
            View::dense(wv.data(), cout, kk),
            View::dense(cols, kk, ho * wo),
            ViewMut::dense(&mut out, cout, ho * wo),
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return shape_err(format!("conv bias {:?} for {cout} channels", bv.shape()));
            }
            for (chunk, &bb) in out.chunks_mut(ho * wo).zip(bv.data()) {
                for o in chunk {
                    *o += bb;
                }
            }
        }
        let out = Tensor::new(&[cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Nearest-neighbour ×2 upsampling of `x [c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = match xv.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => return shape_err("upsample expects [c,h,w]"),
        };
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = xv.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[1..] != bv.shape()[1..] {
            return shape_err(format!(
                "cannot concat {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Multi-head attention probabilities `softmax(Q_h K_hᵀ / √d_head)` for
    /// `q [l, heads·d_head]`, `k [s, heads·d_head]`. Returns `[heads, l, s]`.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let (l, inner) = qv.dims2()?;
        let (s, inner_k) = kv.dims2()?;
        if inner != inner_k || heads == 0 || inner % heads != 0 {
            return shape_err(format!(
                "attention q {:?} / k {:?} with {heads} heads",
                qv.shape(),
                kv.shape()
            ));
        }
        let dh = inner / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); heads * l * s];
        for h in 0..heads {
            let block = &mut out[h * l * s..(h + 1) * l * s];
            kernels::gemm(
                View::cols_of(qv.data(), l, inner, h * dh, dh),
                View::cols_of(kv.data(), s, inner, h * dh, dh).t(),
                ViewMut::dense(block, l, s),
                false,
            );
            for x in block.iter_mut() {
                *x *= scale;
            }
            kernels::softmax_rows_in_place(block, s);
        }
        let out = Tensor::new(&[heads, l, s], out)?;
        self.push(out, Op::AttnProbs { q, k, heads, scale }, &[q, k])
    }

    /// Applies per-head probabilities `p [heads, l, s]` to `v [s, heads·d_head]`,
    /// concatenating head outputs into `[l, heads·d_head]`.
    pub fn attn_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let (heads, l, s) = match pv.shape()[..] {
            [h, l, s] => (h, l, s),
            _ => return shape_err("attention probabilities must be [heads,l,s]"),
        };
        let (sv, inner) = vv.dims2()?;
        if sv != s || inner % heads != 0 {
            return shape_err(format!(
                "values {:?} incompatible with probabilities {:?}",
                vv.shape(),
                pv.shape()
            ));
        }
        let dh = inner / heads;
        let mut out = vec![T::zero(); l * inner];
        for h in 0..heads {
            kernels::gemm(
                View::dense(&pv.data()[h * l * s..(h + 1) * l * s], l, s),
                View::cols_of(vv.data(), s, inner, h * dh, dh),
                ViewMut::cols_of(&mut out, l, inner, h * dh, dh),
                false,
            );
        }
        let out = Tensor::new(&[l, inner], out)?;
        self.push(out, Op::AttnApply { p, v }, &[p, v])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let n = T::of(diff.numel() as f64);
        let total: T = diff.data().iter().map(|&d| d * d).sum();
        self.push(Tensor::scalar(total / n), Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(Error::Config("backward on an inference graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return shape_err("backward requires a scalar loss");
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(Var(i), &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, out: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = self.value(out);
        match &self.nodes[out.0].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let da = if ta {
                        kernels::matmul(bv, tb, g, true)?
                    } else {
                        kernels::matmul(g, false, bv, !tb)?
                    };
                    self.accumulate(grads, a, da)?;
                }
                if self.needs(b) {
                    let db = if tb {
                        kernels::matmul(g, true, av, ta)?
                    } else {
                        kernels::matmul(av, !ta, g, false)?
                    };
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-T::one()))?;
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?)?;
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?)?;
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.scale(c))?,
            &Op::Axpy(x, y, alpha) => {
                self.accumulate(grads, x, g.clone())?;
                if self.needs(y) {
                    self.accumulate(grads, y, g.scale(alpha))?;
                }
            }
            &Op::AddRowBias(x, b) => {
                self.accumulate(grads, x, g.clone())?;
                if self.needs(b) {
                    let n = self.value(b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[n], db)?)?;
                }
            }
            &Op::AddChannelBias(x, b) => {
                self.accumulate(grads, x, g.clone())?;
                if self.needs(b) {
                    let c = self.value(b).numel();
                    let per = g.numel() / c;
                    let db = g.data().chunks(per).map(|ch| ch.iter().copied().sum()).collect();
                    self.accumulate(grads, b, Tensor::new(&[c], db)?)?;
                }
            }
            &Op::Silu(x) => {
                let dx = g.zip_map(self.value(x), |gi, xi| {
                    let s = kernels::sigmoid(xi);
                    gi * s * (T::one() + xi * (T::one() - s))
                })?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::SoftmaxRows(x) => {
                let cols = *y.shape().last().unwrap();
                let dx = kernels::softmax_rows_backward(y.data(), g.data(), cols);
                self.accumulate(grads, x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *y.shape().last().unwrap();
                let gv = self.value(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[n], dg)?)?;
                    self.accumulate(grads, *beta, Tensor::new(&[n], db)?)?;
                }
                if self.needs(*x) {
                    let mut dxhat = g.data().to_vec();
                    for row in dxhat.chunks_mut(n) {
                        for (d, &gm) in row.iter_mut().zip(gv.data()) {
                            *d *= gm;
                        }
                    }
                    let dx = kernels::normalize_blocks_backward(xhat, inv_std, &dxhat, n);
                    self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let c = y.shape()[0];
                let per = y.numel() / c;
                let gv = self.value(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ci in 0..c {
                        let gs = &g.data()[ci * per..(ci + 1) * per];
                        let hs = &xhat[ci * per..(ci + 1) * per];
                        dg[ci] = gs.iter().zip(hs).map(|(&a, &b)| a * b).sum();
                        db[ci] = gs.iter().copied().sum();
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[c], dg)?)?;
                    self.accumulate(grads, *beta, Tensor::new(&[c], db)?)?;
                }
                if self.needs(*x) {
                    let mut dxhat = g.data().to_vec();
                    for (ci, chunk) in dxhat.chunks_mut(per).enumerate() {
                        let gm = gv.data()[ci];
                        for d in chunk {
                            *d *= gm;
                        }
                    }
                    let block = per * (c / groups);
                    let dx = kernels::normalize_blocks_backward(xhat, inv_std, &dxhat, block);
                    self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
                }
            }
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let hw = y.shape()[1] * y.shape()[2];
                let kk = cin * k * k;
                let direct = k == 1 && stride == 1 && pad == 0;
                if self.needs(w) {
                    let cols_owned;
                    let cols: &[T] = if direct {
                        xv.data()
                    } else {
                        cols_owned = kernels::im2col(xv.data(), (cin, h, wd), k, stride, pad);
                        &cols_owned
                    };
                    let mut dw = vec![T::zero(); cout * kk];
                    kernels::gemm(
                        View::dense(g.data(), cout, hw),
                        View::dense(cols, kk, hw).t(),
                        ViewMut::dense(&mut dw, cout, kk),
                        false,
                    );
                    self.accumulate(grads, w, Tensor::new(wv.shape(), dw)?)?;
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = g.data().chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                        self.accumulate(grads, b, Tensor::new(&[cout], db)?)?;
                    }
                }
                if self.needs(x) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    kernels::gemm(
                        View::dense(wv.data(), cout, kk).t(),
                        View::dense(g.data(), cout, hw),
                        ViewMut::dense(&mut dcols, kk, hw),
                        false,
                    );
                    let dx = if direct {
                        dcols
                    } else {
                        kernels::col2im(&dcols, (cin, h, wd), k, stride, pad)
                    };
                    self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?)?;
                }
            }
            &Op::Upsample2x(x) => {
                let xs = self.value(x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ci * h + yy / 2) * w + xx / 2] += g.data()[(ci * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xs, dx)?)?;
            }
            &Op::ConcatChannels(a, b) => {
                let split = self.value(a).numel();
                let da = Tensor::new(self.value(a).shape(), g.data()[..split].to_vec())?;
                let db = Tensor::new(self.value(b).shape(), g.data()[split..].to_vec())?;
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
            &Op::Transpose(x) => self.accumulate(grads, x, g.transpose()?)?,
            &Op::Reshape(x) => {
                let dx = g.clone().reshape(self.value(x).shape())?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::AttnProbs { q, k, heads, scale } => {
                let (qv, kv) = (self.value(q), self.value(k));
                let (l, inner) = (qv.shape()[0], qv.shape()[1]);
                let s = kv.shape()[0];
                let dh = inner / heads;
                let mut dq = vec![T::zero(); l * inner];
                let mut dk = vec![T::zero(); s * inner];
                for h in 0..heads {
                    let range = h * l * s..(h + 1) * l * s;
                    let mut ds =
                        kernels::softmax_rows_backward(&y.data()[range.clone()], &g.data()[range], s);
                    for v in ds.iter_mut() {
                        *v *= scale;
                    }
                    if self.needs(q) {
                        kernels::gemm(
                            View::dense(&ds, l, s),
                            View::cols_of(kv.data(), s, inner, h * dh, dh),
                            ViewMut::cols_of(&mut dq, l, inner, h * dh, dh),
                            false,
                        );
                    }
                    if self.needs(k) {
                        kernels::gemm(
                            View::dense(&ds, l, s).t(),
                            View::cols_of(qv.data(), l, inner, h * dh, dh),
                            ViewMut::cols_of(&mut dk, s, inner, h * dh, dh),
                            false,
                        );
                    }
                }
                self.accumulate(grads, q, Tensor::new(&[l, inner], dq)?)?;
                self.accumulate(grads, k, Tensor::new(&[s, inner], dk)?)?;
            }
            &Op::AttnApply { p, v } => {
                let (pv, vv) = (self.value(p), self.value(v));
                let (heads, l, s) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                let inner = vv.shape()[1];
                let dh = inner / heads;
                if self.needs(p) {
                    let mut dp = vec![T::zero(); heads * l * s];
                    for h in 0..heads {
                        kernels::gemm(
                            View::cols_of(g.data(), l, inner, h * dh, dh),
                            View::cols_of(vv.data(), s, inner, h * dh, dh).t(),
                            ViewMut::dense(&mut dp[h * l * s..(h + 1) * l * s], l, s),
                            false,
                        );
                    }
                    self.accumulate(grads, p, Tensor::new(pv.shape(), dp)?)?;
                }
                if self.needs(v) {
                    let mut dv = vec![T::zero(); s * inner];
                    for h in 0..heads {
                        kernels::gemm(
                            View::dense(&pv.data()[h * l * s..(h + 1) * l * s], l, s).t(),
                            View::cols_of(g.data(), l, inner, h * dh, dh),
                            ViewMut::cols_of(&mut dv, s, inner, h * dh, dh),
                            false,
                        );
                    }
                    self.accumulate(grads, v, Tensor::new(&[s, inner], dv)?)?;
                }
            }
            &Op::Mse(a, b) => {
                let gs = g.item();
                let (av, bv) = (self.value(a), self.value(b));
                let c = T::of(2.0) * gs / T::of(av.numel() as f64);
                let da = av.zip_map(bv, |x, y| c * (x - y))?;
                if self.needs(b) {
                    self.accumulate(grads, b, da.scale(-T::one()))?;
                }
                self.accumulate(grads, a, da)?;
            }
            &Op::Sum(x) => {
                let dx = Tensor::full(self.value(x).shape(), g.item());
                self.accumulate(grads, x, dx)?;
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let dx = Tensor::full(xv.shape(), g.item() / T::of(xv.numel() as f64));
                self.accumulate(grads, x, dx)?;
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Axpy(..) => "axpy",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Silu(_) => "silu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GroupNorm { .. } => "group_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::Upsample2x(_) => "upsample2x",
        Op::ConcatChannels(..) => "concat_channels",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::AttnProbs { .. } => "attn_probs",
        Op::AttnApply { .. } => "attn_apply",
        Op::Mse(..) => "mse",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
