//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every op appends one node
//! holding its output value and enough context to run its backward rule, so
//! node order is a topological order by construction. [`Tape::backward`]
//! walks the arena once in reverse from a scalar loss node.

use rayon::prelude::*;

use super::conv::{col2im, im2col, Geometry};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Dense { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    L2Distance { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Mul { a: Var, b: Var },
    CapsPredict { x: Var, w: Var, b: Var },
    Center { x: Var, axis: usize, divisor: T },
    RouteSum { q: Var, r: Var },
    RouteAgree { r: Var, v: Var },
    Squash { x: Var },
    SliceLast { x: Var, start: usize },
    MeanAxis { x: Var, axis: usize },
    Mse { a: Var, b: Var },
    L2Loss { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BceLogits { x: Var, target: T },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Gathers `src` (of `shape`) into the layout given by `perm`.
fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn grad(&self, x: Var) -> Option<&Tensor<T>> {
        self.nodes[x.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, x: Var) -> Option<Tensor<T>> {
        self.nodes[x.0].grad.take()
    }

    fn needs(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    // ---------------------------------------------------------------------
    // Layer ops

    /// 2-D convolution, NCHW input, `[Cout, Cin, k, k]` weights, 'same'
    /// padding (k/2); stride 2 gives ceil(H/2).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv2d", format!("stride {stride} not in {{1,2}}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let (batch, cout) = (xs[0], ws[0]);
        let g = Geometry::same(xs[1], xs[2], xs[3], ws[2], stride);
        let (ho, wo) = (g.out_height(), g.out_width());
        let isz = xs[1] * xs[2] * xs[3];
        let osz = cout * ho * wo;
        let mut out = vec![T::zero(); batch * osz];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            out.par_chunks_mut(osz)
                .zip(xv.par_chunks(isz))
                .for_each(|(o, xi)| {
                    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
                    im2col(&g, xi, &mut cols);
                    gemm(false, false, cout, ho * wo, g.col_rows(), wv, &cols, T::zero(), o);
                    if let Some(bias) = bias {
                        for (c, plane) in o.chunks_mut(ho * wo).enumerate() {
                            plane.iter_mut().for_each(|v| *v += bias[c]);
                        }
                    }
                });
        }
        let value = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::Conv2d { x, w, b, stride }))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] at the same
    /// stride); weights `[Cin, Cout, k, k]`, output spatial size `H * stride`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv_transpose2d", format!("stride {stride} not in {{1,2}}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape("conv_transpose2d", &ws, self.shape(b)));
            }
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[1]);
        let (hi, wi) = (xs[2], xs[3]);
        let g = Geometry::same(cout, hi * stride, wi * stride, ws[2], stride);
        debug_assert_eq!((g.out_height(), g.out_width()), (hi, wi));
        let osz = cout * g.height * g.width;
        let isz = cin * hi * wi;
        let mut out = vec![T::zero(); batch * osz];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            out.par_chunks_mut(osz)
                .zip(xv.par_chunks(isz))
                .for_each(|(o, xi)| {
                    let mut cols = vec![T::zero(); g.col_rows() * hi * wi];
                    gemm(true, false, g.col_rows(), hi * wi, cin, wv, xi, T::zero(), &mut cols);
                    col2im(&g, &cols, o);
                    if let Some(bias) = bias {
                        for (c, plane) in o.chunks_mut(g.height * g.width).enumerate() {
                            plane.iter_mut().for_each(|v| *v += bias[c]);
                        }
                    }
                });
        }
        let value = Tensor::new(vec![batch, cout, g.height, g.width], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::ConvT2d { x, w, b, stride }))
    }

    /// `x [B, In] · w [In, Out] + b [Out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::shape("dense", &ws, self.shape(b)));
            }
        }
        let (batch, nin, nout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); batch * nout];
        gemm(false, false, batch, nout, nin, self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(nout) {
                row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
            }
        }
        let value = Tensor::new(vec![batch, nout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::Dense { x, w, b }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, &[x], Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, &[x], Op::Sigmoid { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Softmax { x, axis }))
    }

    /// Batch norm over axis 1 (`[B, C, ...]`); statistics pool batch and
    /// all trailing axes. Returns the batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (batch, ch, inner) = axis_split(&shape, 1);
        let m = T::from_usize(batch * inner).unwrap();
        let eps = T::lit(BN_EPS);
        let src = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += src[(b * ch + c) * inner..(b * ch + c + 1) * inner].iter().copied().sum::<T>();
                    }
                    let mu = s / m;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &src[(b * ch + c) * inner..(b * ch + c + 1) * inner] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[c] = mu;
                    var[c] = sq / m;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * inner;
                for j in base..base + inner {
                    let h = (src[j] - mean[c]) * inv_std[c];
                    xhat[j] = h;
                    out[j] = g[c] * h + bt[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let stats = train.then_some(BatchStats { mean, var });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(value, &[x, gamma, beta], op), stats))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(permuted_shape(&shape, perm), data)?;
        Ok(self.push(value, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Row-wise Euclidean distance between `[B, D]` tensors; output `[B]`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 2 {
            return Err(Error::shape("l2_distance", &sa, &sb));
        }
        let d = sa[1];
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(vec![sa[0]], out)?;
        Ok(self.push(value, &[a, b], Op::L2Distance { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, &[x], Op::Scale { x, c })
    }

    // ---------------------------------------------------------------------
    // Capsule ops

    /// Per-(local feature, cluster) linear map: `x [B, N, Dp]`,
    /// `w [N, K, Df, Dp]`, `b [K, Df]` → `[B, N, K, Df]`.
    pub fn caps_predict(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[1] != ws[0] || xs[2] != ws[3] {
            return Err(Error::shape("caps_predict", &xs, &ws));
        }
        if bs != [ws[1], ws[2]] {
            return Err(Error::shape("caps_predict", &ws, &bs));
        }
        let (batch, n, dp) = (xs[0], xs[1], xs[2]);
        let (k, df) = (ws[1], ws[2]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * n * k * df];
        out.par_chunks_mut(n * k * df)
            .zip(xv.par_chunks(n * dp))
            .for_each(|(o, xb)| {
                for i in 0..n {
                    let xi = &xb[i * dp..(i + 1) * dp];
                    for c in 0..k {
                        let base = (i * k + c) * df;
                        for d in 0..df {
                            let wrow = &wv[((i * k + c) * df + d) * dp..((i * k + c) * df + d + 1) * dp];
                            let dot: T = wrow.iter().zip(xi).map(|(&p, &q)| p * q).sum();
                            o[base + d] = dot + bv[c * df + d];
                        }
                    }
                }
            });
        let value = Tensor::new(vec![batch, n, k, df], out)?;
        Ok(self.push(value, &[x, w, b], Op::CapsPredict { x, w, b }))
    }

    /// `y = x - (1/divisor) * sum over axis`. With `divisor` equal to the
    /// axis extent this is mean removal.
    pub fn center(&mut self, x: Var, axis: usize, divisor: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("center", format!("axis {axis} out of range for {shape:?}")));
        }
        if divisor <= T::zero() {
            return Err(Error::invalid("center", "divisor must be positive"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let s: T = (0..n).map(|k| out[(o * n + k) * inner + i]).sum();
                let m = s / divisor;
                for k in 0..n {
                    out[(o * n + k) * inner + i] -= m;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Center { x, axis, divisor }))
    }

    /// `s[b,k,:] = sum_i q[b,i,k] * r[b,i,k,:]`.
    pub fn route_sum(&mut self, q: Var, r: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let rs = self.shape(r).to_vec();
        if qs.len() != 3 || rs.len() != 4 || qs[..] != rs[..3] {
            return Err(Error::shape("route_sum", &qs, &rs));
        }
        let (batch, n, k, d) = (rs[0], rs[1], rs[2], rs[3]);
        let qv = self.value(q).data();
        let rv = self.value(r).data();
        let mut out = vec![T::zero(); batch * k * d];
        for b in 0..batch {
            for i in 0..n {
                for c in 0..k {
                    let w = qv[(b * n + i) * k + c];
                    let src = &rv[((b * n + i) * k + c) * d..((b * n + i) * k + c + 1) * d];
                    let dst = &mut out[(b * k + c) * d..(b * k + c + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += w * v);
                }
            }
        }
        let value = Tensor::new(vec![batch, k, d], out)?;
        Ok(self.push(value, &[q, r], Op::RouteSum { q, r }))
    }

    /// Agreement `a[b,i,k] = <r[b,i,k,:], v[b,k,:]>`.
    pub fn route_agree(&mut self, r: Var, v: Var) -> Result<Var> {
        let rs = self.shape(r).to_vec();
        let vs = self.shape(v).to_vec();
        if rs.len() != 4 || vs.len() != 3 || vs[0] != rs[0] || vs[1] != rs[2] || vs[2] != rs[3] {
            return Err(Error::shape("route_agree", &rs, &vs));
        }
        let (batch, n, k, d) = (rs[0], rs[1], rs[2], rs[3]);
        let rv = self.value(r).data();
        let vv = self.value(v).data();
        let mut out = vec![T::zero(); batch * n * k];
        for b in 0..batch {
            for i in 0..n {
                for c in 0..k {
                    let ri = &rv[((b * n + i) * k + c) * d..((b * n + i) * k + c + 1) * d];
                    let vk = &vv[(b * k + c) * d..(b * k + c + 1) * d];
                    out[(b * n + i) * k + c] = ri.iter().zip(vk).map(|(&p, &q)| p * q).sum();
                }
            }
        }
        let value = Tensor::new(vec![batch, n, k], out)?;
        Ok(self.push(value, &[r, v], Op::RouteAgree { r, v }))
    }

    /// Capsule squash over the last axis: `v = s * |s| / (1 + |s|^2)`.
    pub fn squash(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let f = squash_factor(row.iter().map(|&v| v * v).sum::<T>().sqrt());
            row.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, &[x], Op::Squash { x })
    }

    /// Keeps `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if start >= end || end > d {
            return Err(Error::invalid("slice_last", format!("range {start}..{end} of {d}")));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::SliceLast { x, start }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::invalid("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let nt = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= nt);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, &[x], Op::MeanAxis { x, axis }))
    }

    // ---------------------------------------------------------------------
    // Reductions and losses (all produce a one-element tensor)

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), &[a, b], Op::Mse { a, b }))
    }

    /// Batch mean of per-sample Euclidean norms `|a_b - b_b|`.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l2_loss", self.shape(a), self.shape(b)));
        }
        let batch = self.shape(a)[0];
        let per = self.value(a).len() / batch;
        let s: T = self
            .value(a)
            .data()
            .chunks(per)
            .zip(self.value(b).data().chunks(per))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt())
            .sum();
        let value = Tensor::scalar(s / T::from_usize(batch).unwrap());
        Ok(self.push(value, &[a, b], Op::L2Loss { a, b }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} >= class count {c}")));
        }
        let mut probs = vec![T::zero(); shape[0] * c];
        let mut loss = T::zero();
        for (b, row) in self.value(logits).data().chunks(c).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[b]];
        }
        let value = Tensor::scalar(loss / T::from_usize(shape[0]).unwrap());
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, &[logits], op))
    }

    /// Mean binary cross-entropy of logits against a constant target in
    /// [0, 1]: `mean(softplus(x) - t x)`.
    pub fn bce_with_logits(&mut self, x: Var, target: T) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s: T = self.value(x).data().iter().map(|&v| softplus(v) - target * v).sum();
        self.push(Tensor::scalar(s / n), &[x], Op::BceLogits { x, target })
    }

    /// `sum_j w_j * term_j` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            let item = self.value(v).item().ok_or_else(|| Error::shape("weighted_sum", self.shape(v), &[1]))?;
            s += w * item;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(s), &inputs, Op::WeightedSum { terms: terms.to_vec() }))
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Populates gradients of every grad-requiring node reachable from the
    /// scalar `loss`. Gradients accumulate if called more than once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.accumulate(loss, seed);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else { continue };
            let contributions = self.backward_node(idx, &g);
            for (v, t) in contributions {
                self.accumulate(v, t);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, t: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&t),
            None => node.grad = Some(t),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, cout) = (xs[0], ws[0]);
                let geo = Geometry::same(xs[1], xs[2], xs[3], ws[2], *stride);
                let npos = geo.col_cols();
                let isz = xs[1] * xs[2] * xs[3];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                let partials: Vec<Vec<T>> = (0..batch)
                    .into_par_iter()
                    .map(|s| {
                        let go = &gd[s * cout * npos..(s + 1) * cout * npos];
                        let mut dw = Vec::new();
                        if need_w {
                            let mut cols = vec![T::zero(); geo.col_rows() * npos];
                            im2col(&geo, &xv[s * isz..(s + 1) * isz], &mut cols);
                            dw = vec![T::zero(); wv.len()];
                            gemm(false, true, cout, geo.col_rows(), npos, go, &cols, T::zero(), &mut dw);
                        }
                        dw
                    })
                    .collect();
                if need_x {
                    dx.par_chunks_mut(isz).enumerate().for_each(|(s, dxs)| {
                        let go = &gd[s * cout * npos..(s + 1) * cout * npos];
                        let mut dcols = vec![T::zero(); geo.col_rows() * npos];
                        gemm(true, false, geo.col_rows(), npos, cout, wv, go, T::zero(), &mut dcols);
                        col2im(&geo, &dcols, dxs);
                    });
                    out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
                }
                if need_w {
                    out.push((*w, sum_partials(ws, partials)));
                }
                if let Some(b) = b {
                    out.push((*b, channel_sums(gd, batch, cout, npos)));
                }
            }
            Op::ConvT2d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, cin, cout) = (xs[0], xs[1], ws[1]);
                let npos_in = xs[2] * xs[3];
                let geo = Geometry::same(cout, xs[2] * stride, xs[3] * stride, ws[2], *stride);
                let osz = cout * geo.height * geo.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![T::zero(); xv.len()];
                let partials: Vec<Vec<T>> = dx
                    .par_chunks_mut(cin * npos_in)
                    .enumerate()
                    .map(|(s, dxs)| {
                        let mut dcols = vec![T::zero(); geo.col_rows() * npos_in];
                        im2col(&geo, &gd[s * osz..(s + 1) * osz], &mut dcols);
                        if need_x {
                            gemm(false, false, cin, npos_in, geo.col_rows(), wv, &dcols, T::zero(), dxs);
                        }
                        let mut dw = Vec::new();
                        if need_w {
                            dw = vec![T::zero(); wv.len()];
                            let xsmp = &xv[s * cin * npos_in..(s + 1) * cin * npos_in];
                            gemm(false, true, cin, geo.col_rows(), npos_in, xsmp, &dcols, T::zero(), &mut dw);
                        }
                        dw
                    })
                    .collect();
                if need_x {
                    out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
                }
                if need_w {
                    out.push((*w, sum_partials(ws, partials)));
                }
                if let Some(b) = b {
                    out.push((*b, channel_sums(gd, batch, cout, geo.height * geo.width)));
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, nin, nout) = (xs[0], xs[1], ws[1]);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * nin];
                    gemm(false, true, batch, nin, nout, gd, self.value(*w).data(), T::zero(), &mut dx);
                    out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); nin * nout];
                    gemm(true, false, nin, nout, batch, self.value(*x).data(), gd, T::zero(), &mut dw);
                    out.push((*w, Tensor::new(ws.to_vec(), dw).unwrap()));
                }
                if let Some(b) = b {
                    out.push((*b, column_sums(gd, nout)));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { gg * *slope })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), d).unwrap()));
            }
            Op::Sigmoid { x } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gg)| gg * y * (T::one() - y))
                    .collect();
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d).unwrap()));
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| y[at(k)] * gd[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(shape.to_vec(), d).unwrap()));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (batch, ch, inner) = axis_split(shape, 1);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * inner;
                        for j in base..base + inner {
                            dgamma[c] += gd[j] * xhat[j];
                            dbeta[c] += gd[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let m = T::from_usize(batch * inner).unwrap();
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let base = (b * ch + c) * inner;
                            for j in base..base + inner {
                                dx[j] = if *train {
                                    // dxhat = g * gamma; sums over the batch are
                                    // dbeta * gamma and dgamma * gamma
                                    gam[c] * inv_std[c] / m * (m * gd[j] - dbeta[c] - xhat[j] * dgamma[c])
                                } else {
                                    gd[j] * gam[c] * inv_std[c]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(shape.to_vec(), dx).unwrap()));
                }
                out.push((*gamma, Tensor::new(vec![ch], dgamma).unwrap()));
                out.push((*beta, Tensor::new(vec![ch], dbeta).unwrap()));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.shape(*x)).unwrap()));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(gd, node.value.shape(), &inv);
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), d).unwrap()));
            }
            Op::L2Distance { a, b } => {
                let shape = self.shape(*a);
                let dim = shape[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![T::zero(); av.len()];
                for (r, &dist) in node.value.data().iter().enumerate() {
                    if dist > T::zero() {
                        for j in r * dim..(r + 1) * dim {
                            da[j] = gd[r] * (av[j] - bv[j]) / dist;
                        }
                    }
                }
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                out.push((*a, Tensor::new(shape.to_vec(), da).unwrap()));
                out.push((*b, Tensor::new(shape.to_vec(), db).unwrap()));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                let shape = self.shape(*a).to_vec();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = gd.iter().zip(bv).map(|(&gg, &q)| gg * q).collect();
                let db = gd.iter().zip(av).map(|(&gg, &p)| gg * p).collect();
                out.push((*a, Tensor::new(shape.clone(), da).unwrap()));
                out.push((*b, Tensor::new(shape, db).unwrap()));
            }
            Op::Scale { x, c } => {
                out.push((*x, g.map(|v| v * *c)));
            }
            Op::CapsPredict { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, n, dp) = (xs[0], xs[1], xs[2]);
                let (k, df) = (ws[1], ws[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    dx.par_chunks_mut(n * dp).enumerate().for_each(|(s, dxb)| {
                        for i in 0..n {
                            for c in 0..k {
                                for d in 0..df {
                                    let gg = gd[((s * n + i) * k + c) * df + d];
                                    let wrow = &wv[((i * k + c) * df + d) * dp..((i * k + c) * df + d + 1) * dp];
                                    for p in 0..dp {
                                        dxb[i * dp + p] += gg * wrow[p];
                                    }
                                }
                            }
                        }
                    });
                    out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    dw.par_chunks_mut(k * df * dp).enumerate().for_each(|(i, dwi)| {
                        for s in 0..batch {
                            let xi = &xv[(s * n + i) * dp..(s * n + i + 1) * dp];
                            for c in 0..k {
                                for d in 0..df {
                                    let gg = gd[((s * n + i) * k + c) * df + d];
                                    let dst = &mut dwi[(c * df + d) * dp..(c * df + d + 1) * dp];
                                    dst.iter_mut().zip(xi).for_each(|(o, &xv)| *o += gg * xv);
                                }
                            }
                        }
                    });
                    out.push((*w, Tensor::new(ws.to_vec(), dw).unwrap()));
                }
                let mut db = vec![T::zero(); k * df];
                for chunk in gd.chunks(k * df) {
                    db.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
                }
                out.push((*b, Tensor::new(vec![k, df], db).unwrap()));
            }
            Op::Center { x, axis, divisor } => {
                let shape = node.value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let mut d = gd.to_vec();
                for o in 0..outer {
                    for i in 0..inner {
                        let s: T = (0..n).map(|k| gd[(o * n + k) * inner + i]).sum();
                        let m = s / *divisor;
                        for k in 0..n {
                            d[(o * n + k) * inner + i] -= m;
                        }
                    }
                }
                out.push((*x, Tensor::new(shape.to_vec(), d).unwrap()));
            }
            Op::RouteSum { q, r } => {
                let rs = self.shape(*r);
                let (batch, n, k, dd) = (rs[0], rs[1], rs[2], rs[3]);
                let qv = self.value(*q).data();
                let rv = self.value(*r).data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dr = vec![T::zero(); rv.len()];
                for b in 0..batch {
                    for i in 0..n {
                        for c in 0..k {
                            let qi = (b * n + i) * k + c;
                            let gs = &gd[(b * k + c) * dd..(b * k + c + 1) * dd];
                            let ri = &rv[qi * dd..(qi + 1) * dd];
                            dq[qi] = gs.iter().zip(ri).map(|(&p, &q)| p * q).sum();
                            let dst = &mut dr[qi * dd..(qi + 1) * dd];
                            dst.iter_mut().zip(gs).for_each(|(o, &v)| *o = qv[qi] * v);
                        }
                    }
                }
                out.push((*q, Tensor::new(self.shape(*q).to_vec(), dq).unwrap()));
                out.push((*r, Tensor::new(rs.to_vec(), dr).unwrap()));
            }
            Op::RouteAgree { r, v } => {
                let rs = self.shape(*r);
                let (batch, n, k, dd) = (rs[0], rs[1], rs[2], rs[3]);
                let rv = self.value(*r).data();
                let vv = self.value(*v).data();
                let mut dr = vec![T::zero(); rv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                for b in 0..batch {
                    for i in 0..n {
                        for c in 0..k {
                            let ai = (b * n + i) * k + c;
                            let ga = gd[ai];
                            let vk = &vv[(b * k + c) * dd..(b * k + c + 1) * dd];
                            let ri = &rv[ai * dd..(ai + 1) * dd];
                            for j in 0..dd {
                                dr[ai * dd + j] = ga * vk[j];
                                dv[(b * k + c) * dd + j] += ga * ri[j];
                            }
                        }
                    }
                }
                out.push((*r, Tensor::new(rs.to_vec(), dr).unwrap()));
                out.push((*v, Tensor::new(self.shape(*v).to_vec(), dv).unwrap()));
            }
            Op::Squash { x } => {
                let shape = node.value.shape();
                let d = *shape.last().unwrap();
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for ((s, gv), o) in xv.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let n2: T = s.iter().map(|&v| v * v).sum();
                    let n = n2.sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let f = squash_factor(n);
                    // d/dn [n / (1 + n^2)] = (1 - n^2) / (1 + n^2)^2
                    let fp = (T::one() - n2) / ((T::one() + n2) * (T::one() + n2));
                    let sg: T = s.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                    let coef = fp / n * sg;
                    for j in 0..d {
                        o[j] = f * gv[j] + coef * s[j];
                    }
                }
                out.push((*x, Tensor::new(shape.to_vec(), dx).unwrap()));
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let w = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (dst, src) in dx.chunks_mut(d).zip(gd.chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_split(xs, *axis);
                let nt = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = gd[o * inner + i] / nt;
                        }
                    }
                }
                out.push((*x, Tensor::new(xs.to_vec(), dx).unwrap()));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.shape(*x), gd[0])));
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = gd[0] * T::lit(2.0) / T::from_usize(av.len()).unwrap();
                let da: Vec<T> = av.iter().zip(bv).map(|(&p, &q)| c * (p - q)).collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                let shape = self.shape(*a).to_vec();
                out.push((*a, Tensor::new(shape.clone(), da).unwrap()));
                out.push((*b, Tensor::new(shape, db).unwrap()));
            }
            Op::L2Loss { a, b } => {
                let shape = self.shape(*a).to_vec();
                let batch = shape[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let per = av.len() / batch;
                let bt = T::from_usize(batch).unwrap();
                let mut da = vec![T::zero(); av.len()];
                for s in 0..batch {
                    let r = s * per..(s + 1) * per;
                    let norm: T = av[r.clone()].iter().zip(&bv[r.clone()]).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt();
                    if norm > T::zero() {
                        for j in r {
                            da[j] = gd[0] * (av[j] - bv[j]) / (norm * bt);
                        }
                    }
                }
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                out.push((*a, Tensor::new(shape.clone(), da).unwrap()));
                out.push((*b, Tensor::new(shape, db).unwrap()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.shape(*logits);
                let c = shape[1];
                let bt = T::from_usize(shape[0]).unwrap();
                let mut d = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * c + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * gd[0] / bt);
                out.push((*logits, Tensor::new(shape.to_vec(), d).unwrap()));
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.len()).unwrap();
                out.push((*x, xv.map(|v| gd[0] * (sigmoid(v) - *target) / n)));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    out.push((v, Tensor::scalar(gd[0] * w)));
                }
            }
        }
        out
    }
}

/// `|s| / (1 + |s|^2)`, the factor that squashes `s` into the unit ball.
pub(crate) fn squash_factor<T: Real>(norm: T) -> T {
    norm / (T::one() + norm * norm)
}

fn sum_partials<T: Real>(shape: &[usize], partials: Vec<Vec<T>>) -> Tensor<T> {
    let mut acc = vec![T::zero(); shape.iter().product()];
    for p in partials {
        acc.iter_mut().zip(&p).for_each(|(a, &v)| *a += v);
    }
    Tensor::new(shape.to_vec(), acc).unwrap()
}

/// Sums `[B, C, P]` gradient data over batch and positions per channel.
fn channel_sums<T: Real>(gd: &[T], batch: usize, ch: usize, npos: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            acc[c] += gd[(b * ch + c) * npos..(b * ch + c + 1) * npos].iter().copied().sum::<T>();
        }
    }
    Tensor::new(vec![ch], acc).unwrap()
}

/// Column sums of a row-major `[rows, width]` buffer.
fn column_sums<T: Real>(gd: &[T], width: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); width];
    for row in gd.chunks(width) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    Tensor::new(vec![width], acc).unwrap()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_is_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.5, -2.0, 7.0]));
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[5], 3.3f64));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_with_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.1);
        let x = tape.constant(img.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0f32));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), Some(0.5));
        assert_eq!(tape.grad(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f32>::zeros(&[2]));
        let y = tape.sigmoid(x);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { op: "backward", .. }));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[2, 3]));
        let w = tape.constant(Tensor::<f32>::zeros(&[4, 5]));
        let msg = tape.dense(x, w, None).unwrap_err().to_string();
        assert!(msg.contains("dense") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let img = tape.constant(Tensor::<f32>::zeros(&[1, 3, 8, 8]));
        let k = tape.constant(Tensor::<f32>::zeros(&[2, 3, 3, 3]));
        assert!(tape.conv2d(img, k, None, 3).is_err());
    }

    #[test]
    fn stride_two_convolutions_halve_with_ceil() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 9, 8]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 5, 5]));
        let y = tape.conv2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 5, 4]);
        let wt = tape.constant(Tensor::zeros(&[3, 2, 5, 5]));
        let z = tape.conv_transpose2d(y, wt, None, 2).unwrap();
        assert_eq!(tape.shape(z), &[1, 2, 10, 8]);
    }

    #[test]
    fn training_batch_norm_standardizes_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[8, 3, 2, 2], |i| ((i * 37 % 11) as f64) * 0.7 + (i % 3) as f64 * 5.0));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let yd = tape.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|n| (0..4).map(move |p| (n * 3 + c) * 4 + p)).map(|i| yd[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn(&[2, 3, 7, 7], |i| (i as f32 * 0.37).sin()));
            let w = tape.constant(Tensor::from_fn(&[4, 3, 5, 5], |i| (i as f32 * 0.11).cos() * 0.1));
            let y = tape.conv2d(x, w, None, 2).unwrap();
            let y = tape.leaky_relu(y, 0.2);
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let mut tape = Tape::new();
            let x = tape.constant(t(&[n], &logits));
            let xs = tape.constant(t(&[n], &logits.iter().map(|v| v + shift).collect::<Vec<_>>()));
            let y = tape.softmax(x, 0).unwrap();
            let ys = tape.softmax(xs, 0).unwrap();
            let s: f64 = tape.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
            for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn sigmoid_stays_in_open_interval(x in -15.0f32..15.0) {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::scalar(x));
            let y = tape.sigmoid(v);
            let p = tape.value(y).item().unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
