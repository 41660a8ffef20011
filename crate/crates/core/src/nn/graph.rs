//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Gradients are only propagated into nodes that transitively depend on a
//! tracked leaf, so frozen parameters and constants cost nothing in
//! [`Graph::backward`].

use std::collections::HashMap;

use super::conv::{self, ConvDims, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of one batch-norm application (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, dims: ConvDims },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Affine(Var, T),
    Ln(Var),
    Clamp(Var, T, T),
    AddN(Vec<Var>),
    Mul(Var, Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(u64, usize), Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batch norm needs [B, C, ...], got {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients (e.g. an input under a gradient check).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. A parameter is bound once per graph;
    /// repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, track: bool) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, track);
        self.bound.insert(key, v);
        v
    }

    /// Gradients of every parameter of `store`, aligned with its entries.
    pub fn param_grads(&self, grads: &Grads<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(&(store.uid(), i))
                    .and_then(|&v| grads.get(v))
                    .cloned()
            })
            .collect()
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * out];
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape(&[out])?;
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), n, inp),
            MatRef::t(self.value(w).data(), out, inp),
            if b.is_some() { T::one() } else { T::zero() },
            &mut y,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[n, out], y)?, Op::Linear { x, w, b }, needs))
    }

    /// Cross-correlation over `[B, C, H, W]` (2-D) or `[B, C, T, H, W]` (3-D)
    /// with weight `[C_out, C_in, ...kernel]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c_in, input) = conv::split_shape(&xs)?;
        let c_out = ws[0];
        if ws.len() < 2 || ws[1] != c_in || self.value(w).numel() != c_out * c_in * geom.kernel_volume() {
            return Err(Error::Shape(format!("conv: weight {ws:?} incompatible with input {xs:?}")));
        }
        let output = geom.conv_out(input)?;
        let dims = ConvDims { batch, c_in, c_out, input, output };
        let bias = b.map(|b| self.value(b).data().to_vec());
        if let Some(bias) = &bias {
            if bias.len() != c_out {
                return Err(Error::Shape(format!("conv bias length {} != {c_out}", bias.len())));
            }
        }
        let y = conv::conv_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), &dims, &geom);
        let shape = conv::join_shape(batch, c_out, output, xs.len() == 5);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv { x, w, b, geom, dims }, needs))
    }

    /// Transposed convolution with weight `[C_in, C_out, ...kernel]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c_in, input) = conv::split_shape(&xs)?;
        if ws.len() < 2 || ws[0] != c_in || self.value(w).numel() != c_in * ws[1] * geom.kernel_volume() {
            return Err(Error::Shape(format!(
                "conv_transpose: weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let c_out = ws[1];
        let output = geom.transpose_out(input)?;
        let dims = ConvDims { batch, c_in, c_out, input, output };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = conv::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.as_deref(),
            &dims,
            &geom,
        );
        let shape = conv::join_shape(batch, c_out, output, xs.len() == 5);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::ConvTranspose { x, w, b, geom, dims }, needs))
    }

    /// Batch normalization with batch statistics over all axes except 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (b, c, inner) = channel_layout(self.value(x).shape())?;
        let count = T::from_usize(b * inner).unwrap();
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let s: T = xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner].iter().copied().sum();
                mean[ci] = mean[ci] + s;
            }
        }
        for m in &mut mean {
            *m = *m / count;
        }
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                let s: T = xd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum();
                var[ci] = var[ci] + s;
            }
        }
        for v in &mut var {
            *v = *v / count;
        }
        let out = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (population) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, inner) = channel_layout(&shape)?;
        self.value(gamma).expect_shape(&[c])?;
        self.value(beta).expect_shape(&[c])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batch norm statistics need {c} channels")));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                let (m, s, gc, bc) = (mean[ci], inv_std[ci], g[ci], be[ci]);
                for (o, &v) in y[range.clone()].iter_mut().zip(&xd[range]) {
                    *o = (v - m) * s * gc + bc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm { x, gamma, beta, mean: mean.to_vec(), inv_std, train };
        Ok(self.push(Tensor::new(&shape, y)?, op, needs))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let y = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(y, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, c) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        self.unary(x, Op::Affine(x, a), move |v| v * a + c)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active. NaN
    /// passes through so divergence stays visible.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        self.unary(x, Op::Clamp(x, l, h), move |v| if v.is_nan() { v } else { v.max(l).min(h) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &xs[1..] {
            acc.add_assign(self.value(v))?;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(acc, Op::AddN(xs.to_vec()), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), needs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow(axis, start, len)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Narrow { x, axis, start }, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = Tensor::concat(&parts, axis)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(y, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(y, Op::Reshape(x), needs))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(x);
        self.push(y, Op::Mean(x), needs)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = (if matches!(node.op, Op::Leaf) { None } else { grads[i].take() }) else {
                continue;
            };
            self.propagate(&node.op, &node.value, &gy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp, out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    gemm(MatRef::new(gy.data(), n, out), MatRef::new(wv.data(), out, inp), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[n, inp], dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(MatRef::t(gy.data(), n, out), MatRef::new(xv.data(), n, inp), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[out, inp], dw)?)?;
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); out];
                    for row in gy.data().chunks_exact(out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[out], db)?)?;
                }
            }
            Op::Conv { x, w, b, geom, dims } | Op::ConvTranspose { x, w, b, geom, dims } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (xv, wv) = (self.value(*x), self.value(*w));
                let g = if matches!(op, Op::Conv { .. }) {
                    conv::conv_backward(xv.data(), wv.data(), gy.data(), dims, geom, need)
                } else {
                    conv::conv_transpose_backward(xv.data(), wv.data(), gy.data(), dims, geom, need)
                };
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
                }
                if let Some(dw) = g.dw {
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?)?;
                }
                if let (Some(db), Some(b)) = (g.db, b) {
                    self.accumulate(grads, *b, Tensor::new(&[db.len()], db)?)?;
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let xv = self.value(*x);
                let (b, c, inner) = channel_layout(xv.shape())?;
                let gam = self.value(*gamma).data();
                let (xd, gd) = (xv.data(), gy.data());
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                        for (&g, &v) in gd[r.clone()].iter().zip(&xd[r]) {
                            sum_g[ci] = sum_g[ci] + g;
                            sum_gx[ci] = sum_gx[ci] + g * (v - mean[ci]) * inv_std[ci];
                        }
                    }
                }
                if self.needs(*x) {
                    let count = T::from_usize(b * inner).unwrap();
                    let mut dx = vec![T::zero(); xd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                            let k = gam[ci] * inv_std[ci];
                            for ((o, &g), &v) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xd[r]) {
                                *o = if *train {
                                    let xhat = (v - mean[ci]) * inv_std[ci];
                                    k * (g - sum_g[ci] / count - xhat * sum_gx[ci] / count)
                                } else {
                                    k * g
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx)?)?;
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g)?)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gy.zip_map(xv, |g, v| if v > T::zero() { g } else { T::zero() })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let d = gy.zip_map(self.value(*x), move |g, v| if v > T::zero() { g } else { g * s })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = gy.zip_map(y, |g, s| g * s * (T::one() - s))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Tanh(x) => {
                let d = gy.zip_map(y, |g, t| g * (T::one() - t * t))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Affine(x, a) => {
                self.accumulate(grads, *x, gy.scale(*a))?;
            }
            Op::Ln(x) => {
                let d = gy.zip_map(self.value(*x), |g, v| g / v)?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = gy.zip_map(self.value(*x), move |g, v| if v < lo || v > hi { T::zero() } else { g })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::AddN(xs) => {
                for &v in xs {
                    self.accumulate(grads, v, gy.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gy.zip_map(self.value(*b), |g, q| g * q)?;
                    self.accumulate(grads, *a, d)?;
                }
                if self.needs(*b) {
                    let d = gy.zip_map(self.value(*a), |g, p| g * p)?;
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (n, len) = (xs[*axis], gy.dim(*axis));
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, d)?)?;
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = self.value(v).dim(*axis);
                    if self.needs(v) {
                        self.accumulate(grads, v, gy.narrow(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gy.reshape(self.value(*x).shape())?)?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gy.data()[0] / T::from_usize(xv.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g))?;
            }
        }
        Ok(())
    }
}
