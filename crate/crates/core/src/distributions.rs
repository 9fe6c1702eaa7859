//! Reparameterized samplers and closed-form divergences.
//!
//! Noise is always passed in, so every sampler is a pure function. The
//! `*_node` variants build the same computation on a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 10.0;

/// Diagonal Gaussian with clamped log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<S> {
    mean: Vec<S>,
    log_std: Vec<S>,
}

impl<S: Scalar> GaussianParams<S> {
    pub fn new(mean: Vec<S>, log_std: Vec<S>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(invalid(format!("mean has {} entries, log_std {}", mean.len(), log_std.len())));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite Gaussian parameter"));
        }
        let (lo, hi) = (S::of(LOG_STD_MIN), S::of(LOG_STD_MAX));
        let log_std = log_std.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![S::zero(); dim], log_std: vec![S::zero(); dim] }
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn log_std(&self) -> &[S] {
        &self.log_std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Unnormalized log-probabilities of a categorical.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalLogits<S> {
    logits: Vec<S>,
}

impl<S: Scalar> CategoricalLogits<S> {
    pub fn new(logits: Vec<S>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits must be non-empty and finite"));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<S> {
        softmax(&self.logits)
    }
}

fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut v = x.to_vec();
    crate::graph::softmax_in_place(&mut v);
    v
}

/// `μ + exp(log σ) ⊙ ε`.
pub fn sample_gaussian<S: Scalar>(p: &GaussianParams<S>, eps: &[S]) -> Result<Vec<S>> {
    if eps.len() != p.dim() {
        return Err(invalid(format!("noise has {} entries, expected {}", eps.len(), p.dim())));
    }
    Ok(p.mean.iter().zip(&p.log_std).zip(eps).map(|((&m, &s), &e)| m + s.exp() * e).collect())
}

/// `softmax((logits + G) / λ)`.
pub fn sample_concrete<S: Scalar>(l: &CategoricalLogits<S>, lambda: f64, gumbel: &[S]) -> Result<Vec<S>> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {lambda}")));
    }
    if gumbel.len() != l.logits.len() {
        return Err(invalid("gumbel noise length differs from K"));
    }
    let inv = S::of(1.0 / lambda);
    let scaled: Vec<S> = l.logits.iter().zip(gumbel).map(|(&a, &g)| (a + g) * inv).collect();
    Ok(softmax(&scaled))
}

/// `argmax(logits + G)`, lowest index on ties.
pub fn gumbel_max<S: Scalar>(l: &CategoricalLogits<S>, gumbel: &[S]) -> usize {
    argmax(l.logits.iter().zip(gumbel).map(|(&a, &g)| a + g))
}

/// Index of the first maximum.
pub fn argmax<S: Scalar>(values: impl IntoIterator<Item = S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// KL(q ‖ p) between diagonal Gaussians.
pub fn kl_gaussian_gaussian<S: Scalar>(q: &GaussianParams<S>, p: &GaussianParams<S>) -> Result<S> {
    if q.dim() != p.dim() {
        return Err(invalid(format!("dimension mismatch {} vs {}", q.dim(), p.dim())));
    }
    let half = S::of(0.5);
    let mut kl = S::zero();
    for i in 0..q.dim() {
        let ratio = (S::of(2.0) * (q.log_std[i] - p.log_std[i])).exp();
        let d = q.mean[i] - p.mean[i];
        let maha = d * d * (S::of(-2.0) * p.log_std[i]).exp();
        kl += p.log_std[i] - q.log_std[i] + half * (ratio + maha - S::one());
    }
    Ok(kl.max(S::zero()))
}

/// `Σ q log(q/p)` with `0 log 0 = 0`; `+∞` when `q` puts mass where `p` has none.
pub fn kl_categorical<S: Scalar>(q: &[S], p: &[S]) -> Result<S> {
    if q.len() != p.len() {
        return Err(invalid("probability vectors differ in length"));
    }
    for v in [q, p] {
        let s: S = v.iter().copied().sum();
        if (s - S::one()).abs() > S::of(1e-6) || v.iter().any(|&x| x < S::zero()) {
            return Err(invalid("argument is not on the simplex"));
        }
    }
    let mut kl = S::zero();
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > S::zero() {
            if pi <= S::zero() {
                return Ok(S::infinity());
            }
            kl += qi * (qi / pi).ln();
        }
    }
    Ok(kl.max(S::zero()))
}

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::of(v)
        })
        .collect()
}

/// `-log(-log u)` with `u ~ U(0, 1)`.
pub fn gumbel_noise<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            S::of(-(-u.ln()).ln())
        })
        .collect()
}

// ---- graph versions --------------------------------------------------------

/// `μ + exp(log σ) ⊙ ε` on the tape.
pub fn gaussian_sample_node<S: Scalar>(g: &mut Graph<S>, mean: Var, log_std: Var, eps: Var) -> Var {
    let std = g.exp(log_std);
    let noise = g.mul(std, eps);
    g.add(mean, noise)
}

/// Row-wise `softmax((logits + G) / λ)` on the tape.
pub fn concrete_sample_node<S: Scalar>(g: &mut Graph<S>, logits: Var, gumbel: Var, lambda: f64) -> Var {
    let perturbed = g.add(logits, gumbel);
    let scaled = g.scale(perturbed, 1.0 / lambda);
    g.softmax(scaled)
}

/// Per-row KL(N(μ, σ²) ‖ N(c, I)); `center` has the same shape as `mean`. Returns `[N]`.
pub fn kl_to_unit_gaussian_node<S: Scalar>(g: &mut Graph<S>, mean: Var, log_std: Var, center: Var) -> Var {
    let two_log = g.scale(log_std, 2.0);
    let var = g.exp(two_log);
    let d = g.sub(mean, center);
    let d2 = g.mul(d, d);
    let a = g.add(var, d2);
    let b = g.sub(a, two_log);
    let c = g.add_const(b, -1.0);
    let per_row = g.sum_last(c);
    g.scale(per_row, 0.5)
}

/// Per-row KL(softmax(q) ‖ softmax(p)) between logit rows. Returns `[N]`.
pub fn kl_softmax_node<S: Scalar>(g: &mut Graph<S>, q_logits: Var, p_logits: Var) -> Var {
    let log_p = g.log_softmax(p_logits);
    kl_softmax_to_log_probs_node(g, q_logits, log_p)
}

/// Per-row KL(softmax(q) ‖ p) with `log_p` given as log-probabilities. Returns `[N]`.
pub fn kl_softmax_to_log_probs_node<S: Scalar>(g: &mut Graph<S>, q_logits: Var, log_p: Var) -> Var {
    let q = g.softmax(q_logits);
    let log_q = g.log_softmax(q_logits);
    let diff = g.sub(log_q, log_p);
    let terms = g.mul(q, diff);
    g.sum_last(terms)
}
