//! Transformer building blocks shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One forward pass: a fresh tape over a borrowed parameter set.
pub struct Forward<'a, S> {
    pub g: Graph<S>,
    pub store: &'a ParamStore<S>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore<S>) -> Self {
        Self { g: Graph::new(), store, dropout: 0.0, rng: None }
    }

    /// Training mode with the given dropout rate.
    pub fn train(store: &'a ParamStore<S>, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self { g: Graph::new(), store, dropout, rng: Some(rng) }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.g.constant(t)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else { return x };
        let keep = S::of(1.0 / (1.0 - p));
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect();
        let m = self.g.constant(Tensor::from_vec(&shape, mask));
        self.g.mul(x, m)
    }
}

/// Registers parameters under a name prefix.
pub struct Builder<'a, S> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, S>) -> T) -> T {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value, trainable)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        bld.scope(name, |b| {
            let w = fan_in_uniform(&[din, dout], din, b.rng);
            let w = b.add("weight", w, true);
            let bias = bias.then(|| {
                let v = fan_in_uniform(&[dout], din, b.rng);
                b.add("bias", v, true)
            });
            Linear { w, b: bias }
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.g.linear(x, w, b)
    }
}

/// `g · h / ‖h‖` with a single learnable gain, initialised to `sqrt(C)`.
#[derive(Debug, Clone)]
pub struct ScaleNorm {
    pub g: ParamId,
}

impl ScaleNorm {
    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, name: &str, channels: usize) -> Self {
        let g = bld.add(&format!("{name}.g"), Tensor::scalar(S::of((channels as f64).sqrt())), true);
        Self { g }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let g = f.p(self.g);
        f.g.scale_norm(x, g)
    }
}

/// Overlapping strided 1-D convolution `[B, T, C_in] -> [B, ceil-ish(T/S), C]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { proj: Linear::new(bld, "patch_embed", kernel * cin, cout, true), kernel, stride }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let windows = f.g.unfold(x, self.kernel, self.stride, self.kernel / 2);
        self.proj.forward(f, windows)
    }
}

/// Conditional positional encoding: residual depthwise convolution, kernel 3.
#[derive(Debug, Clone)]
pub struct Cpe {
    pub w: ParamId,
    pub b: ParamId,
}

impl Cpe {
    pub const KERNEL: usize = 3;

    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, channels: usize) -> Self {
        bld.scope("cpe", |b| {
            let w = fan_in_uniform(&[channels, Self::KERNEL], Self::KERNEL, b.rng);
            let w = b.add("weight", w, true);
            let bias = fan_in_uniform(&[channels], Self::KERNEL, b.rng);
            let bias = b.add("bias", bias, true);
            Cpe { w, b: bias }
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let conv = f.g.depthwise_conv(x, w, b);
        f.g.add(x, conv)
    }
}

/// Scaled dot-product multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, channels: usize, heads: usize) -> Self {
        bld.scope("attn", |b| Mhsa {
            q: Linear::new(b, "q", channels, channels, true),
            k: Linear::new(b, "k", channels, channels, true),
            v: Linear::new(b, "v", channels, channels, true),
            out: Linear::new(b, "out", channels, channels, true),
            heads,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let c = f.g.shape(x)[2];
        let dh = c / self.heads;
        let q = self.q.forward(f, x);
        let k = self.k.forward(f, x);
        let v = self.v.forward(f, x);
        let q = f.g.scale(q, 1.0 / (dh as f64).sqrt());
        let q = f.g.split_heads(q, self.heads);
        let k = f.g.split_heads(k, self.heads);
        let v = f.g.split_heads(v, self.heads);
        let scores = f.g.matmul(q, k, false, true);
        let att = f.g.softmax(scores);
        let att = f.dropout(att);
        let ctx = f.g.matmul(att, v, false, false);
        let ctx = f.g.merge_heads(ctx, self.heads);
        self.out.forward(f, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(bld: &mut Builder<'_, S>, channels: usize, expansion: usize) -> Self {
        bld.scope("ffn", |b| FeedForward {
            fc1: Linear::new(b, "fc1", channels, channels * expansion, true),
            fc2: Linear::new(b, "fc2", channels * expansion, channels, true),
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.g.gelu(h);
        let h = f.dropout(h);
        self.fc2.forward(f, h)
    }
}

/// CPE, then pre-norm attention and feed-forward sublayers with residuals.
#[derive(Debug, Clone)]
pub struct Block {
    pub cpe: Cpe,
    pub norm1: ScaleNorm,
    pub attn: Mhsa,
    pub norm2: ScaleNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<S: Scalar>(
        bld: &mut Builder<'_, S>,
        name: &str,
        channels: usize,
        heads: usize,
        expansion: usize,
    ) -> Self {
        bld.scope(name, |b| Block {
            cpe: Cpe::new(b, channels),
            norm1: ScaleNorm::new(b, "norm1", channels),
            attn: Mhsa::new(b, channels, heads),
            norm2: ScaleNorm::new(b, "norm2", channels),
            ffn: FeedForward::new(b, channels, expansion),
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let x = self.cpe.forward(f, x);
        let h = self.norm1.forward(f, x);
        let h = self.attn.forward(f, h);
        let h = f.dropout(h);
        let x = f.g.add(x, h);
        let h = self.norm2.forward(f, x);
        let h = self.ffn.forward(f, h);
        let h = f.dropout(h);
        f.g.add(x, h)
    }
}
