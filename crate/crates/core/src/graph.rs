//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node holding its value.
//! [`Graph::backward`] walks the tape once in reverse and returns gradients
//! for every node that depends on a differentiable leaf.

use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm floor for every normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    ScaleNorm { x: Var, g: Option<Var> },
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: Var, w: Var, b: Var },
    MeanTime(Var),
    RepeatTime(Var),
    SliceRows(Var),
    GatherTime { x: Var, idx: Vec<usize> },
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Concat(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MulScalarVar(Var, Var),
    Reshape(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on a tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, created at most once per graph.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- forward ops ------------------------------------------------------

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), din, "linear input dim mismatch");
        let n = xv.rows();
        let mut out = vec![S::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        gemm(S::one(), MatRef::new(xv.data(), n, din), MatRef::new(wv.data(), din, dout), beta, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(&shape, out), Op::Linear { x, w, b }, needs)
    }

    /// Batched matrix product over the last two axes, with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ba, ra, ca) = split_batch(av.shape());
        let (bb, rb, cb) = split_batch(bv.shape());
        assert_eq!(ba, bb, "matmul batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![S::zero(); ba * m * n];
        for i in 0..ba {
            let am = mat(&av.data()[i * ra * ca..(i + 1) * ra * ca], ra, ca, ta);
            let bm = mat(&bv.data()[i * rb * cb..(i + 1) * rb * cb], rb, cb, tb);
            gemm(S::one(), am, bm, S::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = av.shape()[..av.shape().len().saturating_sub(2)].to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = av.shape();
        let sb = bv.shape();
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_suffix: {sb:?} is not a suffix of {sa:?}"
        );
        let m = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(m) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&shape, out), Op::AddSuffix(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = S::of(c);
        let out = self.value(a).map(|x| x * k);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = S::of(c);
        let out = self.value(a).map(|x| x + k);
        let needs = self.needs(a);
        self.push(out, Op::AddConst(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push(out, Op::Exp(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(S::zero()));
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        let needs = self.needs(a);
        self.push(out, Op::Gelu(a), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::of(lo), S::of(hi));
        let out = self.value(a).map(|x| x.max(l).min(h));
        let needs = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(av.last_dim()) {
            softmax_in_place(row);
        }
        let t = Tensor::from_vec(av.shape(), out);
        let needs = self.needs(a);
        self.push(t, Op::Softmax(a), needs)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(av.last_dim()) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_vec(av.shape(), out);
        let needs = self.needs(a);
        self.push(t, Op::LogSoftmax(a), needs)
    }

    /// `g · h / max(‖h‖, eps)` per row of the last axis; `g` has one element.
    pub fn scale_norm(&mut self, x: Var, g: Var) -> Var {
        let gain = self.item(g);
        let out = normalize_rows(self.value(x), gain);
        let needs = self.needs(x) || self.needs(g);
        self.push(out, Op::ScaleNorm { x, g: Some(g) }, needs)
    }

    /// Unit ℓ2 normalization of every row.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let out = normalize_rows(self.value(x), S::one());
        let needs = self.needs(x);
        self.push(out, Op::ScaleNorm { x, g: None }, needs)
    }

    /// `[B, T, C] -> [B, T_out, kernel·C]` sliding windows with zero padding.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (b, t_in, c) = dims3(xv.shape());
        let t_out = conv_out_len(t_in, kernel, stride, pad);
        let mut out = vec![S::zero(); b * t_out * kernel * c];
        let xd = xv.data();
        for bi in 0..b {
            for t in 0..t_out {
                for p in 0..kernel {
                    let src = (t * stride + p) as isize - pad as isize;
                    if src < 0 || src as usize >= t_in {
                        continue;
                    }
                    let s = (bi * t_in + src as usize) * c;
                    let d = ((bi * t_out + t) * kernel + p) * c;
                    out[d..d + c].copy_from_slice(&xd[s..s + c]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b, t_out, kernel * c], out), Op::Unfold { x, kernel, stride, pad }, needs)
    }

    /// Depthwise 1-D convolution, `w: [C, kernel]`, `b: [C]`, same-length output.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bs, t, c) = dims3(xv.shape());
        let kernel = wv.shape()[1];
        assert_eq!(wv.shape()[0], c);
        let pad = kernel / 2;
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![S::zero(); bs * t * c];
        for bi in 0..bs {
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                o.copy_from_slice(bd);
                for j in 0..kernel {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let xs = &xd[(bi * t + src as usize) * c..(bi * t + src as usize + 1) * c];
                    for ch in 0..c {
                        o[ch] += wd[ch * kernel + j] * xs[ch];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[bs, t, c], out), Op::DepthwiseConv { x, w, b }, needs)
    }

    /// `[B, T, C] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, t, c) = dims3(xv.shape());
        let mut out = vec![S::zero(); b * c];
        let inv = S::one() / S::of(t as f64);
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b, c], out), Op::MeanTime(x), needs)
    }

    /// `[B, C] -> [B, T, C]` by replication.
    pub fn repeat_time(&mut self, x: Var, t: usize) -> Var {
        let xv = self.value(x);
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(b * t * c);
        for bi in 0..b {
            let row = &xv.data()[bi * c..(bi + 1) * c];
            for _ in 0..t {
                out.extend_from_slice(row);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b, t, c], out), Op::RepeatTime(x), needs)
    }

    /// First `n` entries along axis 0.
    pub fn slice_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        assert!(n <= shape[0]);
        let inner: usize = shape[1..].iter().product();
        shape[0] = n;
        let out = xv.data()[..n * inner].to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&shape, out), Op::SliceRows(x), needs)
    }

    /// `[B, T_in, C] -> [B, idx.len(), C]` selecting time steps.
    pub fn gather_time(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let (b, t_in, c) = dims3(xv.shape());
        let t_out = idx.len();
        let mut out = Vec::with_capacity(b * t_out * c);
        for bi in 0..b {
            for &ti in &idx {
                assert!(ti < t_in);
                out.extend_from_slice(&xv.data()[(bi * t_in + ti) * c..(bi * t_in + ti + 1) * c]);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b, t_out, c], out), Op::GatherTime { x, idx }, needs)
    }

    /// `[B, T, H·d] -> [B·H, T, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let (b, t, c) = dims3(xv.shape());
        let out = split_heads_data(xv.data(), b, t, c, heads);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b * heads, t, c / heads], out), Op::SplitHeads(x, heads), needs)
    }

    /// `[B·H, T, d] -> [B, T, H·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let (bh, t, d) = dims3(xv.shape());
        let b = bh / heads;
        let out = merge_heads_data(xv.data(), b, t, d * heads, heads);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[b, t, d * heads], out), Op::MergeHeads(x, heads), needs)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (da, db) = (av.last_dim(), bv.last_dim());
        assert_eq!(av.rows(), bv.rows(), "concat row mismatch");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&shape, out), Op::Concat(a, b), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / S::of(av.len().max(1) as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), needs)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<S> = (0..av.rows()).map(|r| av.row(r).iter().copied().sum()).collect();
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&shape, out), Op::SumLast(a), needs)
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.item(s);
        let out = self.value(x).map(|v| v * k);
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::MulScalarVar(x, s), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the one-element node `loss` w.r.t. every upstream node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        let mut leaf: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => leaf[i] = Some(g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    if self.needs(*x) {
                        let mut dx = vec![S::zero(); rows * din];
                        gemm(
                            S::one(),
                            MatRef::new(g.data(), rows, dout),
                            MatRef::new(wv.data(), din, dout).t(),
                            S::zero(),
                            &mut dx,
                        );
                        self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![S::zero(); din * dout];
                        gemm(
                            S::one(),
                            MatRef::new(xv.data(), rows, din).t(),
                            MatRef::new(g.data(), rows, dout),
                            S::zero(),
                            &mut dw,
                        );
                        self.acc(&mut grads, *w, Tensor::from_vec(&[din, dout], dw));
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = vec![S::zero(); dout];
                            for r in g.data().chunks_exact(dout) {
                                for (d, &v) in db.iter_mut().zip(r) {
                                    *d += v;
                                }
                            }
                            self.acc(&mut grads, *b, Tensor::from_vec(&[dout], db));
                        }
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (batch, ra, ca) = split_batch(av.shape());
                    let (_, rb, cb) = split_batch(bv.shape());
                    let (_, m, nn) = split_batch(out.shape());
                    let gd = g.data();
                    if self.needs(*a) {
                        let mut da = vec![S::zero(); av.len()];
                        for i in 0..batch {
                            let gm = MatRef::new(&gd[i * m * nn..(i + 1) * m * nn], m, nn);
                            let bm = mat(&bv.data()[i * rb * cb..(i + 1) * rb * cb], rb, cb, *tb);
                            let dst = &mut da[i * ra * ca..(i + 1) * ra * ca];
                            if *ta {
                                // stored a is k×m: da = op(b) · gᵀ
                                gemm(S::one(), bm, gm.t(), S::zero(), dst);
                            } else {
                                gemm(S::one(), gm, bm.t(), S::zero(), dst);
                            }
                        }
                        self.acc(&mut grads, *a, Tensor::from_vec(av.shape(), da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![S::zero(); bv.len()];
                        for i in 0..batch {
                            let gm = MatRef::new(&gd[i * m * nn..(i + 1) * m * nn], m, nn);
                            let am = mat(&av.data()[i * ra * ca..(i + 1) * ra * ca], ra, ca, *ta);
                            let dst = &mut db[i * rb * cb..(i + 1) * rb * cb];
                            if *tb {
                                // stored b is n×k: db = gᵀ · op(a)
                                gemm(S::one(), gm.t(), am, S::zero(), dst);
                            } else {
                                gemm(S::one(), am.t(), gm, S::zero(), dst);
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::from_vec(bv.shape(), db));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = g.zip_map(self.value(*b), |x, y| x * y);
                        self.acc(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = g.zip_map(self.value(*a), |x, y| x * y);
                        self.acc(&mut grads, *b, d);
                    }
                }
                Op::AddSuffix(a, b) => {
                    if self.needs(*b) {
                        let bv = self.value(*b);
                        let m = bv.len();
                        let mut db = vec![S::zero(); m];
                        for chunk in g.data().chunks_exact(m) {
                            for (d, &v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::from_vec(bv.shape(), db));
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let k = S::of(*c);
                    self.acc(&mut grads, *a, g.map(|v| v * k));
                }
                Op::AddConst(a) => self.acc(&mut grads, *a, g),
                Op::Exp(a) => {
                    let d = g.zip_map(out, |x, y| x * y);
                    self.acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| if y > S::zero() { x } else { S::zero() });
                    self.acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |x, y| x * gelu_grad(y));
                    self.acc(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (S::of(*lo), S::of(*hi));
                    let d = g.zip_map(self.value(*a), |x, y| if y >= l && y <= h { x } else { S::zero() });
                    self.acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let k = out.last_dim();
                    let mut d = g.into_vec();
                    for (dr, yr) in d.chunks_exact_mut(k).zip(out.data().chunks_exact(k)) {
                        let dot: S = dr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for (x, &y) in dr.iter_mut().zip(yr) {
                            *x = y * (*x - dot);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::from_vec(out.shape(), d));
                }
                Op::LogSoftmax(a) => {
                    let k = out.last_dim();
                    let mut d = g.into_vec();
                    for (dr, lr) in d.chunks_exact_mut(k).zip(out.data().chunks_exact(k)) {
                        let s: S = dr.iter().copied().sum();
                        for (x, &l) in dr.iter_mut().zip(lr) {
                            *x -= l.exp() * s;
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::from_vec(out.shape(), d));
                }
                Op::ScaleNorm { x, g: gain } => {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let k = gain.map(|v| self.item(v)).unwrap_or_else(S::one);
                    let eps = S::of(NORM_EPS);
                    let mut dx = vec![S::zero(); xv.len()];
                    let mut dg = S::zero();
                    for ((xr, gr), dr) in
                        xv.data().chunks_exact(c).zip(g.data().chunks_exact(c)).zip(dx.chunks_exact_mut(c))
                    {
                        let norm = xr.iter().map(|&v| v * v).sum::<S>().sqrt();
                        if norm < eps {
                            let inv = S::one() / eps;
                            for ((d, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                                *d = k * inv * gv;
                                dg += gv * xv * inv;
                            }
                        } else {
                            let inv = S::one() / norm;
                            let dot: S = xr.iter().zip(gr).map(|(&a, &b)| a * inv * b).sum();
                            dg += dot;
                            for ((d, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                                *d = k * inv * (gv - xv * inv * dot);
                            }
                        }
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                    if let Some(gv) = gain {
                        if self.needs(*gv) {
                            self.acc(&mut grads, *gv, Tensor::scalar(dg));
                        }
                    }
                }
                Op::Unfold { x, kernel, stride, pad } => {
                    let xv = self.value(*x);
                    let (b, t_in, c) = dims3(xv.shape());
                    let t_out = out.shape()[1];
                    let mut dx = vec![S::zero(); xv.len()];
                    let gd = g.data();
                    for bi in 0..b {
                        for t in 0..t_out {
                            for p in 0..*kernel {
                                let src = (t * stride + p) as isize - *pad as isize;
                                if src < 0 || src as usize >= t_in {
                                    continue;
                                }
                                let s = (bi * t_in + src as usize) * c;
                                let d = ((bi * t_out + t) * kernel + p) * c;
                                for ch in 0..c {
                                    dx[s + ch] += gd[d + ch];
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::DepthwiseConv { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (bs, t, c) = dims3(xv.shape());
                    let kernel = wv.shape()[1];
                    let pad = kernel / 2;
                    let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                    let mut dx = vec![S::zero(); xv.len()];
                    let mut dw = vec![S::zero(); wv.len()];
                    let mut db = vec![S::zero(); c];
                    for bi in 0..bs {
                        for ti in 0..t {
                            let gr = &gd[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            for (d, &v) in db.iter_mut().zip(gr) {
                                *d += v;
                            }
                            for j in 0..kernel {
                                let src = ti as isize + j as isize - pad as isize;
                                if src < 0 || src as usize >= t {
                                    continue;
                                }
                                let base = (bi * t + src as usize) * c;
                                for ch in 0..c {
                                    dx[base + ch] += wd[ch * kernel + j] * gr[ch];
                                    dw[ch * kernel + j] += xd[base + ch] * gr[ch];
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                    if self.needs(*w) {
                        self.acc(&mut grads, *w, Tensor::from_vec(wv.shape(), dw));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, Tensor::from_vec(&[c], db));
                    }
                }
                Op::MeanTime(x) => {
                    let xv = self.value(*x);
                    let (b, t, c) = dims3(xv.shape());
                    let inv = S::one() / S::of(t as f64);
                    let mut dx = Vec::with_capacity(xv.len());
                    for bi in 0..b {
                        let gr = &g.data()[bi * c..(bi + 1) * c];
                        for _ in 0..t {
                            dx.extend(gr.iter().map(|&v| v * inv));
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::RepeatTime(x) => {
                    let xv = self.value(*x);
                    let (b, c) = (xv.shape()[0], xv.shape()[1]);
                    let t = out.shape()[1];
                    let mut dx = vec![S::zero(); b * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            let gr = &g.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            for (d, &v) in dx[bi * c..(bi + 1) * c].iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::SliceRows(x) => {
                    let xv = self.value(*x);
                    let mut dx = vec![S::zero(); xv.len()];
                    dx[..g.len()].copy_from_slice(g.data());
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::GatherTime { x, idx } => {
                    let xv = self.value(*x);
                    let (b, t_in, c) = dims3(xv.shape());
                    let t_out = idx.len();
                    let mut dx = vec![S::zero(); xv.len()];
                    for bi in 0..b {
                        for (to, &ti) in idx.iter().enumerate() {
                            let gr = &g.data()[(bi * t_out + to) * c..(bi * t_out + to + 1) * c];
                            for (d, &v) in dx[(bi * t_in + ti) * c..(bi * t_in + ti + 1) * c].iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::SplitHeads(x, h) => {
                    let xv = self.value(*x);
                    let (b, t, c) = dims3(xv.shape());
                    let dx = merge_heads_data(g.data(), b, t, c, *h);
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::MergeHeads(x, h) => {
                    let xv = self.value(*x);
                    let (b, t, c) = dims3(out.shape());
                    let dx = split_heads_data(g.data(), b, t, c, *h);
                    self.acc(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::Concat(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (da, db) = (av.last_dim(), bv.last_dim());
                    let mut ga = Vec::with_capacity(av.len());
                    let mut gb = Vec::with_capacity(bv.len());
                    for r in g.data().chunks_exact(da + db) {
                        ga.extend_from_slice(&r[..da]);
                        gb.extend_from_slice(&r[da..]);
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, Tensor::from_vec(av.shape(), ga));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, Tensor::from_vec(bv.shape(), gb));
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    self.acc(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::MeanAll(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0] / S::of(av.len().max(1) as f64);
                    self.acc(&mut grads, *a, Tensor::full(av.shape(), gv));
                }
                Op::SumLast(a) => {
                    let av = self.value(*a);
                    let k = av.last_dim();
                    let mut d = Vec::with_capacity(av.len());
                    for &v in g.data() {
                        d.extend(std::iter::repeat_n(v, k));
                    }
                    self.acc(&mut grads, *a, Tensor::from_vec(av.shape(), d));
                }
                Op::MulScalarVar(x, s) => {
                    let k = self.item(*s);
                    if self.needs(*s) {
                        let ds: S = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                        self.acc(&mut grads, *s, Tensor::scalar(ds));
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, g.map(|v| v * k));
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, g.reshape(&shape));
                }
            }
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(pi, v)| {
                let v = (*v)?;
                let t = leaf.get(v.0)?.clone()?;
                Some((ParamId::new(pi), t))
            })
            .collect();
        Grads { leaf, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    leaf: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient w.r.t. a differentiable leaf (input or parameter).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameters that received one.
    pub fn params(&self) -> &[(ParamId, Tensor<S>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<S>)> {
        self.params
    }
}

// ---- helpers --------------------------------------------------------------

/// Output length of a padded strided window.
pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = t_in + 2 * pad;
    if padded < kernel {
        return 0;
    }
    (padded - kernel) / stride + 1
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]),
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a [B, T, C] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn mat<S>(data: &[S], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, S> {
    let m = MatRef::new(data, rows, cols);
    if transposed {
        m.t()
    } else {
        m
    }
}

fn split_heads_data<S: Scalar>(x: &[S], b: usize, t: usize, c: usize, heads: usize) -> Vec<S> {
    assert_eq!(c % heads, 0, "channels {c} not divisible by {heads} heads");
    let d = c / heads;
    let mut out = vec![S::zero(); b * t * c];
    for bi in 0..b {
        for ti in 0..t {
            let src = &x[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            for h in 0..heads {
                let dst = ((bi * heads + h) * t + ti) * d;
                out[dst..dst + d].copy_from_slice(&src[h * d..(h + 1) * d]);
            }
        }
    }
    out
}

fn merge_heads_data<S: Scalar>(x: &[S], b: usize, t: usize, c: usize, heads: usize) -> Vec<S> {
    let d = c / heads;
    let mut out = vec![S::zero(); b * t * c];
    for bi in 0..b {
        for ti in 0..t {
            let dst = &mut out[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            for h in 0..heads {
                let src = ((bi * heads + h) * t + ti) * d;
                dst[h * d..(h + 1) * d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn normalize_rows<S: Scalar>(x: &Tensor<S>, gain: S) -> Tensor<S> {
    let c = x.last_dim();
    let eps = S::of(NORM_EPS);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
        let k = gain / norm;
        for v in row.iter_mut() {
            *v *= k;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = S::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `0.5·x·(1 + tanh(u)) = x·σ(2u)` with `u = c(x + a·x³)`.
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let u2 = S::of(2.0 * GELU_C) * (x + S::of(0.044715) * x * x * x);
    x / (S::one() + (-u2).exp())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let a = S::of(0.044715);
    let u2 = S::of(2.0 * GELU_C) * (x + a * x * x * x);
    let s = S::one() / (S::one() + (-u2).exp());
    let du2 = S::of(2.0 * GELU_C) * (S::one() + S::of(3.0) * a * x * x);
    s + x * s * (S::one() - s) * du2
}
