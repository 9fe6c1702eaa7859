//! Loss terms, schedules and the ablation toggle matrix.
//!
//! [`objective`] builds one training loss on a [`Forward`] tape and returns the
//! scalar loss together with a [`LossBreakdown`] of every term. The reference
//! functions ([`recon_loss`], [`cosine_loss`], [`gaussian_component_kl`]) work on
//! plain values and are used by tests and analysis.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    concrete_sample_node, gaussian_sample_node, gumbel_noise, kl_softmax_node, kl_softmax_to_log_probs_node,
    standard_normal,
};
use crate::error::{invalid, Error, Result};
use crate::graph::Var;
use crate::model::layers::Forward;
use crate::model::{CentersMode, ModelConfig, ModelKind, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight of KL(q(y|z) ‖ q(y|x)) over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Gamma2Schedule {
    /// `0.5 · (1 − cos(π · step / total))`.
    Cosine,
    Constant(f64),
}

impl Gamma2Schedule {
    pub fn at(self, step: usize, total_steps: usize) -> f64 {
        match self {
            Gamma2Schedule::Constant(c) => c,
            Gamma2Schedule::Cosine => {
                if total_steps == 0 {
                    return 1.0;
                }
                let r = (step.min(total_steps) as f64) / total_steps as f64;
                0.5 * (1.0 - (PI * r).cos())
            }
        }
    }
}

/// `gamma2_schedule` as a free function.
pub fn gamma2_schedule(step: usize, total_steps: usize, mode: Gamma2Schedule) -> f64 {
    mode.at(step, total_steps)
}

/// Concrete relaxation temperature, decayed exponentially from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcreteSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for ConcreteSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.5 }
    }
}

impl ConcreteSchedule {
    pub fn at(self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.end;
        }
        let r = (step.min(total_steps) as f64) / total_steps as f64;
        self.start * (self.end / self.start).powf(r)
    }
}

/// Weight on the Gaussian mixture KL term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KlAnneal {
    Off,
    /// Linear ramp 0 → 1 over the first `fraction` of training.
    Linear {
        fraction: f64,
    },
}

impl KlAnneal {
    pub fn at(self, step: usize, total_steps: usize) -> f64 {
        match self {
            KlAnneal::Off => 1.0,
            KlAnneal::Linear { fraction } => {
                let ramp = fraction * total_steps as f64;
                if ramp <= 0.0 {
                    1.0
                } else {
                    (step as f64 / ramp).min(1.0)
                }
            }
        }
    }
}

/// Categorical prior p(y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "probs")]
pub enum ClassPrior {
    Uniform,
    Empirical(Vec<f64>),
}

impl ClassPrior {
    /// Empirical frequencies of the labelled records, floored at 1e-6 and renormalised.
    pub fn empirical(counts: &[usize]) -> Self {
        let n: usize = counts.iter().sum();
        let raw: Vec<f64> = counts.iter().map(|&c| (c as f64 / n.max(1) as f64).max(1e-6)).collect();
        let s: f64 = raw.iter().sum();
        ClassPrior::Empirical(raw.iter().map(|p| p / s).collect())
    }

    pub fn log_probs(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            ClassPrior::Uniform => Ok(vec![-(k as f64).ln(); k]),
            ClassPrior::Empirical(p) => {
                if p.len() != k || p.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Config(format!("empirical prior needs {k} positive probabilities")));
                }
                let s: f64 = p.iter().sum();
                Ok(p.iter().map(|v| (v / s).ln()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Cross-entropy of the recognition head on labelled records.
    Ptst,
    /// Generative objective with the configured toggles.
    Tvae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub gamma1: f64,
    pub gamma2_schedule: Gamma2Schedule,
    pub margin: f64,
    pub ce_on_z: bool,
    pub kl_yz_yx: bool,
    /// Labelled records use their label in the cosine or mixture term; otherwise q(y|x) weights every record.
    pub cos_with_ground_truth: bool,
    pub learnable_centers: bool,
    pub kl_ycos_yx: bool,
    pub categorical_prior_kl: bool,
    pub use_dkl_gaussian_instead_of_cos: bool,
    pub concrete_temperature: ConcreteSchedule,
    pub kl_anneal: KlAnneal,
    pub prior_y: ClassPrior,
}

/// Every preset name accepted by [`ObjectiveConfig::preset`].
pub const PRESETS: &[&str] = &[
    "ptst",
    "tvae",
    "I",
    "II",
    "III",
    "IV",
    "V",
    "VI",
    "VII",
    "dkl-fixed",
    "dkl-learnable",
    "cos-fixed",
    "cos-learnable",
    "dkl-fixed-part",
    "dkl-learnable-part",
    "cos-fixed-part",
    "cos-learnable-part",
    "dkl-fixed-full",
    "dkl-learnable-full",
    "cos-fixed-full",
    "cos-learnable-full",
];

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::column_vii()
    }
}

impl ObjectiveConfig {
    fn column_vii() -> Self {
        Self {
            kind: ObjectiveKind::Tvae,
            gamma1: 0.1,
            gamma2_schedule: Gamma2Schedule::Cosine,
            margin: 0.0,
            ce_on_z: true,
            kl_yz_yx: true,
            cos_with_ground_truth: true,
            learnable_centers: true,
            kl_ycos_yx: false,
            categorical_prior_kl: true,
            use_dkl_gaussian_instead_of_cos: false,
            concrete_temperature: ConcreteSchedule::default(),
            kl_anneal: KlAnneal::Off,
            prior_y: ClassPrior::Uniform,
        }
    }

    pub fn ptst() -> Self {
        Self { kind: ObjectiveKind::Ptst, ..Self::column_vii() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let vii = Self::column_vii();
        let part = Self { ce_on_z: false, kl_yz_yx: false, ..vii.clone() };
        let dkl = |learnable: bool, base: &Self| Self {
            use_dkl_gaussian_instead_of_cos: true,
            learnable_centers: learnable,
            kl_anneal: if learnable { KlAnneal::Linear { fraction: 1.0 / 3.0 } } else { KlAnneal::Off },
            ..base.clone()
        };
        Ok(match name {
            "ptst" => Self::ptst(),
            "tvae" | "VII" => vii,
            "I" => part,
            "II" => Self { kl_yz_yx: false, ..vii },
            "III" => Self { gamma2_schedule: Gamma2Schedule::Constant(1.0), ..vii },
            "IV" => Self { cos_with_ground_truth: false, ..vii },
            "V" => Self { learnable_centers: false, ..vii },
            "VI" => Self { kl_ycos_yx: true, ..vii },
            "dkl-fixed" | "dkl-fixed-part" => dkl(false, &part),
            "dkl-learnable" | "dkl-learnable-part" => dkl(true, &part),
            "cos-fixed" | "cos-fixed-part" => Self { learnable_centers: false, ..part },
            "cos-learnable" | "cos-learnable-part" => part,
            "dkl-fixed-full" => dkl(false, &vii),
            "dkl-learnable-full" => dkl(true, &vii),
            "cos-fixed-full" => Self { learnable_centers: false, ..vii },
            "cos-learnable-full" => vii,
            other => {
                return Err(Error::Config(format!("unknown preset {other:?}; expected one of {}", PRESETS.join(", "))))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0) {
            return Err(Error::Config(format!("gamma1 must be >= 0, got {}", self.gamma1)));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [-1, 1]", self.margin)));
        }
        if let Gamma2Schedule::Constant(c) = self.gamma2_schedule {
            if !(c >= 0.0) {
                return Err(Error::Config(format!("constant gamma2 must be >= 0, got {c}")));
            }
        }
        let ConcreteSchedule { start, end } = self.concrete_temperature;
        if !(start > 0.0 && end > 0.0) {
            return Err(Error::Config("concrete temperatures must be positive".into()));
        }
        if let KlAnneal::Linear { fraction } = self.kl_anneal {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("kl anneal fraction {fraction} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether the configuration needs the auxiliary classifier q(y|z).
    pub fn needs_aux(&self) -> bool {
        self.kind == ObjectiveKind::Tvae && (self.ce_on_z || self.kl_yz_yx)
    }

    /// Align a model configuration with the modules this objective trains.
    pub fn configure_model(&self, cfg: &mut ModelConfig) {
        match self.kind {
            ObjectiveKind::Ptst => {
                cfg.kind = ModelKind::Ptst;
                cfg.aux_classifier = false;
                cfg.cos_temperature = false;
            }
            ObjectiveKind::Tvae => {
                cfg.kind = ModelKind::TvPtst;
                cfg.aux_classifier = self.needs_aux();
                cfg.cos_temperature = self.kl_ycos_yx;
                cfg.centers_mode =
                    if self.learnable_centers { CentersMode::Learnable } else { CentersMode::FixedOrthonormal };
            }
        }
    }

    /// Weights applied to each term at a training step; zero for disabled terms.
    pub fn weights(&self, step: usize, total_steps: usize) -> LossWeights {
        if self.kind == ObjectiveKind::Ptst {
            return LossWeights { ce_yx: 1.0, ..LossWeights::default() };
        }
        let g2 = self.gamma2_schedule.at(step, total_steps);
        let z_term = if self.use_dkl_gaussian_instead_of_cos { self.kl_anneal.at(step, total_steps) } else { 1.0 };
        LossWeights {
            recon: 1.0,
            cos_or_kl_z: z_term,
            ce_yx: self.gamma1,
            ce_yz: if self.ce_on_z { self.gamma1 } else { 0.0 },
            kl_yz_yx: if self.kl_yz_yx { g2 } else { 0.0 },
            kl_ycos_yx: if self.kl_ycos_yx { g2 } else { 0.0 },
            kl_yx_prior: if self.categorical_prior_kl { 1.0 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub cos_or_kl_z: f64,
    pub ce_yx: f64,
    pub ce_yz: f64,
    pub kl_yz_yx: f64,
    pub kl_ycos_yx: f64,
    pub kl_yx_prior: f64,
}

/// Unweighted term values of one batch plus the weights used to combine them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    /// Cosine loss, or the Gaussian mixture KL for the baseline.
    pub cos_or_kl_z: f64,
    pub ce_yx: f64,
    pub ce_yz: f64,
    pub kl_yz_yx: f64,
    pub kl_ycos_yx: f64,
    pub kl_yx_prior: f64,
    pub total: f64,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `Σ weight · term`, recomputed from the stored fields.
    pub fn weighted_sum(&self) -> f64 {
        let w = &self.weights;
        w.recon * self.recon
            + w.cos_or_kl_z * self.cos_or_kl_z
            + w.ce_yx * self.ce_yx
            + w.ce_yz * self.ce_yz
            + w.kl_yz_yx * self.kl_yz_yx
            + w.kl_ycos_yx * self.kl_ycos_yx
            + w.kl_yx_prior * self.kl_yx_prior
    }
}

/// Model inputs for one step. Unlabelled records carry `None`.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `[B, T, F]`.
    pub x: Tensor<S>,
    pub labels: Vec<Option<usize>>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(x: Tensor<S>, labels: Vec<Option<usize>>) -> Result<Self> {
        if x.shape().len() != 3 || x.shape()[0] != labels.len() {
            return Err(invalid(format!("{} labels for input of shape {:?}", labels.len(), x.shape())));
        }
        Ok(Self { x, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn n_labelled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Reparameterisation noise for one step.
#[derive(Debug, Clone)]
pub struct Noise<S> {
    /// `[B, D]` standard normal.
    pub eps: Tensor<S>,
    /// `[B, K]` standard Gumbel.
    pub gumbel: Tensor<S>,
}

impl<S: Scalar> Noise<S> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, b: usize, d: usize, k: usize) -> Self {
        let eps = Tensor::from_vec(&[b, d], standard_normal(rng, b * d));
        let gumbel = Tensor::from_vec(&[b, k], gumbel_noise(rng, b * k));
        Self { eps, gumbel }
    }

    /// Zero noise: z = μ and y_cond = softmax(logits / λ) for unlabelled records.
    pub fn zeros(b: usize, d: usize, k: usize) -> Self {
        Self { eps: Tensor::zeros(&[b, d]), gumbel: Tensor::zeros(&[b, k]) }
    }
}

/// Position within training, for schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub step: usize,
    pub total_steps: usize,
}

/// Graph nodes produced while building the loss.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub y_logits: Var,
    pub y_cond: Option<Var>,
    pub mean: Option<Var>,
    pub log_std: Option<Var>,
    pub z: Option<Var>,
    pub x_hat: Option<Var>,
    pub z_logits: Option<Var>,
    pub cos: Option<Var>,
}

pub struct ObjectiveOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub vars: ForwardVars,
}

fn one_hot_rows<S: Scalar>(labels: &[Option<usize>], k: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c >= k {
                return Err(invalid(format!("label {c} out of range for K={k}")));
            }
            t.data_mut()[i * k + c] = S::one();
        }
    }
    Ok(t)
}

fn unlabelled_mask<S: Scalar>(labels: &[Option<usize>], k: usize) -> Tensor<S> {
    let data =
        labels.iter().flat_map(|l| std::iter::repeat_n(if l.is_none() { S::one() } else { S::zero() }, k)).collect();
    Tensor::from_vec(&[labels.len(), k], data)
}

/// `[N]` to `[N, K]` by repeating each entry along a new last axis.
fn broadcast_col<S: Scalar>(f: &mut Forward<'_, S>, v: Var, k: usize) -> Var {
    let n = f.g.shape(v)[0];
    let col = f.g.reshape(v, &[n, 1]);
    let ones = f.constant(Tensor::full(&[1, k], S::one()));
    f.g.matmul(col, ones, false, false)
}

/// Mean over labelled rows of `−log softmax(logits)[y]`.
fn masked_ce<S: Scalar>(f: &mut Forward<'_, S>, logits: Var, one_hot: Var, n_labelled: usize) -> Var {
    let lp = f.g.log_softmax(logits);
    let picked = f.g.mul(lp, one_hot);
    let s = f.g.sum_all(picked);
    f.g.scale(s, -1.0 / n_labelled as f64)
}

/// Per-record, per-class cosine loss `[B, K]`: entry `(b, c)` is the loss if `c` were the class of `b`.
fn cosine_loss_matrix<S: Scalar>(f: &mut Forward<'_, S>, cos: Var, margin: f64) -> Var {
    let k = f.g.shape(cos)[1];
    let pos = f.g.scale(cos, -1.0);
    let pos = f.g.add_const(pos, 1.0);
    let shifted = f.g.add_const(cos, -margin);
    let neg = f.g.relu(shifted);
    let neg_sum = f.g.sum_last(neg);
    let neg_sum = broadcast_col(f, neg_sum, k);
    let others = f.g.sub(neg_sum, neg);
    let others = f.g.scale(others, 1.0 / (k - 1) as f64);
    f.g.add(pos, others)
}

/// Per-record, per-class KL(N(μ, σ²) ‖ N(c_k, I)) as `[B, K]`.
fn gaussian_kl_matrix<S: Scalar>(f: &mut Forward<'_, S>, mean: Var, log_std: Var, centers: Var) -> Var {
    let k = f.g.shape(centers)[0];
    let two_log = f.g.scale(log_std, 2.0);
    let var = f.g.exp(two_log);
    let m2 = f.g.mul(mean, mean);
    let a = f.g.add(var, m2);
    let a = f.g.sub(a, two_log);
    let a = f.g.add_const(a, -1.0);
    let base = f.g.sum_last(a);
    let base = broadcast_col(f, base, k);
    let cross = f.g.matmul(mean, centers, false, true);
    let cross = f.g.scale(cross, -2.0);
    let c2 = f.g.mul(centers, centers);
    let cn = f.g.sum_last(c2);
    let m = f.g.add(base, cross);
    let m = f.g.add_suffix(m, cn);
    f.g.scale(m, 0.5)
}

fn mean_rows<S: Scalar>(f: &mut Forward<'_, S>, per_row: Var) -> Var {
    f.g.mean_all(per_row)
}

/// Build the configured loss for one batch on the tape of `f`.
pub fn objective<S: Scalar>(
    f: &mut Forward<'_, S>,
    net: &Network,
    cfg: &ObjectiveConfig,
    batch: &Batch<S>,
    noise: &Noise<S>,
    progress: Progress,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    let b = batch.size();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    let labels = &batch.labels;
    let n_labelled = batch.n_labelled();
    let n_unlabelled = b - n_labelled;
    let weights = cfg.weights(progress.step, progress.total_steps);
    let mut bd = LossBreakdown { n_labelled, n_unlabelled, weights, ..Default::default() };

    let x = f.constant(batch.x.clone());
    let enc = net.encode(f, x);
    let k = f.g.shape(enc.y_logits)[1];
    let one_hot = f.constant(one_hot_rows::<S>(labels, k)?);
    let mut vars = ForwardVars {
        y_logits: enc.y_logits,
        y_cond: None,
        mean: None,
        log_std: None,
        z: None,
        x_hat: None,
        z_logits: None,
        cos: None,
    };
    let mut terms: Vec<(Var, f64)> = Vec::new();

    if n_labelled > 0 {
        let ce = masked_ce(f, enc.y_logits, one_hot, n_labelled);
        bd.ce_yx = f.g.item(ce).to_f64().unwrap_or(f64::NAN);
        terms.push((ce, weights.ce_yx));
    }

    if cfg.kind == ObjectiveKind::Tvae {
        if net.heads.is_none() {
            return Err(Error::UnsupportedMode("generative objective needs a TV-PTST model".into()));
        }
        if cfg.needs_aux() && net.aux.is_none() {
            return Err(Error::UnsupportedMode("objective needs the auxiliary classifier".into()));
        }
        if cfg.kl_ycos_yx && net.cos_temperature.is_none() {
            return Err(Error::UnsupportedMode("objective needs the cosine temperature".into()));
        }
        let t = batch.x.shape()[1];
        let unl = f.constant(unlabelled_mask::<S>(labels, k));
        let y_cond = if n_unlabelled == 0 {
            one_hot
        } else {
            let lambda = cfg.concrete_temperature.at(progress.step, progress.total_steps);
            let gumbel = f.constant(noise.gumbel.clone());
            let s = concrete_sample_node(&mut f.g, enc.y_logits, gumbel, lambda);
            let s = f.g.mul(s, unl);
            f.g.add(s, one_hot)
        };
        let (mean, log_std) = net.latent(f, enc.pooled, y_cond);
        let eps = f.constant(noise.eps.clone());
        let z = gaussian_sample_node(&mut f.g, mean, log_std, eps);
        let x_hat = net.decode(f, z, y_cond, t)?;
        vars.y_cond = Some(y_cond);
        vars.mean = Some(mean);
        vars.log_std = Some(log_std);
        vars.z = Some(z);
        vars.x_hat = Some(x_hat);

        let diff = f.g.sub(x_hat, x);
        let sq = f.g.mul(diff, diff);
        let recon = f.g.mean_all(sq);
        bd.recon = f.g.item(recon).to_f64().unwrap_or(f64::NAN);
        terms.push((recon, weights.recon));

        let q = f.g.softmax(enc.y_logits);
        let class_w = if !cfg.cos_with_ground_truth {
            q
        } else if n_unlabelled == 0 {
            one_hot
        } else {
            let soft = f.g.mul(q, unl);
            f.g.add(soft, one_hot)
        };
        let need_cos = !cfg.use_dkl_gaussian_instead_of_cos || cfg.kl_ycos_yx;
        let cos = need_cos.then(|| net.cosine_scores(f, z));
        vars.cos = cos;
        let per_class = match cos {
            Some(cos) if !cfg.use_dkl_gaussian_instead_of_cos => cosine_loss_matrix(f, cos, cfg.margin),
            _ => {
                let c = net.centers.as_ref().expect("checked above").id;
                let centers = f.p(c);
                gaussian_kl_matrix(f, mean, log_std, centers)
            }
        };
        let weighted = f.g.mul(class_w, per_class);
        let s = f.g.sum_all(weighted);
        let z_term = f.g.scale(s, 1.0 / b as f64);
        bd.cos_or_kl_z = f.g.item(z_term).to_f64().unwrap_or(f64::NAN);
        terms.push((z_term, weights.cos_or_kl_z));

        if net.aux.is_some() {
            let z_logits = net.aux(f, z);
            vars.z_logits = Some(z_logits);
            if cfg.ce_on_z && n_labelled > 0 {
                let ce = masked_ce(f, z_logits, one_hot, n_labelled);
                bd.ce_yz = f.g.item(ce).to_f64().unwrap_or(f64::NAN);
                terms.push((ce, weights.ce_yz));
            }
            if cfg.kl_yz_yx {
                let kl = kl_softmax_node(&mut f.g, z_logits, enc.y_logits);
                let kl = mean_rows(f, kl);
                bd.kl_yz_yx = f.g.item(kl).to_f64().unwrap_or(f64::NAN);
                terms.push((kl, weights.kl_yz_yx));
            }
        }
        if cfg.kl_ycos_yx {
            let tau = f.p(net.cos_temperature.expect("checked above"));
            let logits = f.g.mul_scalar_var(cos.expect("computed above"), tau);
            let kl = kl_softmax_node(&mut f.g, logits, enc.y_logits);
            let kl = mean_rows(f, kl);
            bd.kl_ycos_yx = f.g.item(kl).to_f64().unwrap_or(f64::NAN);
            terms.push((kl, weights.kl_ycos_yx));
        }
        if cfg.categorical_prior_kl {
            let lp = cfg.prior_y.log_probs(k)?;
            let lp: Vec<f64> = (0..b).flat_map(|_| lp.iter().copied()).collect();
            let lp = f.constant(Tensor::from_f64(&[b, k], &lp));
            let kl = kl_softmax_to_log_probs_node(&mut f.g, enc.y_logits, lp);
            let kl = mean_rows(f, kl);
            bd.kl_yx_prior = f.g.item(kl).to_f64().unwrap_or(f64::NAN);
            terms.push((kl, weights.kl_yx_prior));
        }
    }

    let mut loss = f.constant(Tensor::scalar(S::zero()));
    for (v, w) in terms {
        if w != 0.0 {
            let scaled = f.g.scale(v, w);
            loss = f.g.add(loss, scaled);
        }
    }
    bd.total = f.g.item(loss).to_f64().unwrap_or(f64::NAN);
    Ok(ObjectiveOutput { loss, breakdown: bd, vars })
}

// ---- reference computations ------------------------------------------------

/// Mean squared error over all entries.
pub fn recon_loss<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let n = x.len().max(1) as f64;
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| {
            let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(s / n)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn cosine_loss_from_scores(cos: &[f64], y: usize, margin: f64) -> f64 {
    let k = cos.len();
    let neg: f64 = (0..k).filter(|&c| c != y).map(|c| (cos[c] - margin).max(0.0)).sum();
    (1.0 - cos[y]) + neg / (k - 1).max(1) as f64
}

/// `(1 − cos(z, c_y)) + mean over k ≠ y of max(0, cos(z, c_k) − margin)`; `centers` is `[K, D]`.
pub fn cosine_loss(z: &[f64], centers: &Tensor<f64>, y: usize, margin: f64) -> Result<f64> {
    let k = centers.rows();
    if y >= k || centers.last_dim() != z.len() {
        return Err(invalid(format!("class {y} or dimension {} invalid for centers {:?}", z.len(), centers.shape())));
    }
    let cos: Vec<f64> = (0..k).map(|c| cosine(z, centers.row(c))).collect();
    Ok(cosine_loss_from_scores(&cos, y, margin))
}

/// Cosine loss with per-class weights (soft labels).
pub fn cosine_loss_soft(z: &[f64], centers: &Tensor<f64>, weights: &[f64], margin: f64) -> Result<f64> {
    let k = centers.rows();
    if weights.len() != k {
        return Err(invalid(format!("{} weights for {k} classes", weights.len())));
    }
    let mut total = 0.0;
    for (y, &w) in weights.iter().enumerate() {
        total += w * cosine_loss(z, centers, y, margin)?;
    }
    Ok(total)
}

/// KL(N(μ, σ²) ‖ N(c_k, I)) for every row `c_k` of `centers`.
pub fn gaussian_component_kl(mean: &[f64], log_std: &[f64], centers: &Tensor<f64>) -> Result<Vec<f64>> {
    if mean.len() != log_std.len() || centers.last_dim() != mean.len() {
        return Err(invalid("mean, log σ and centers disagree in dimension"));
    }
    Ok((0..centers.rows())
        .map(|k| {
            let c = centers.row(k);
            0.5 * mean
                .iter()
                .zip(log_std)
                .zip(c)
                .map(|((m, s), c)| (2.0 * s).exp() + (m - c).powi(2) - 1.0 - 2.0 * s)
                .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma2_endpoints() {
        let m = Gamma2Schedule::Cosine;
        assert_eq!(gamma2_schedule(0, 100, m), 0.0);
        assert!((gamma2_schedule(100, 100, m) - 1.0).abs() < 1e-12);
        assert!((gamma2_schedule(50, 100, m) - 0.5).abs() < 1e-12);
        assert_eq!(gamma2_schedule(3, 0, m), 1.0);
        assert_eq!(gamma2_schedule(7, 10, Gamma2Schedule::Constant(0.25)), 0.25);
    }

    #[test]
    fn concrete_and_anneal_schedules() {
        let c = ConcreteSchedule::default();
        assert_eq!(c.at(0, 10), 1.0);
        assert!((c.at(10, 10) - 0.5).abs() < 1e-12);
        assert!((c.at(5, 10) - 0.5f64.sqrt()).abs() < 1e-12);
        let a = KlAnneal::Linear { fraction: 1.0 / 3.0 };
        assert_eq!(a.at(0, 90), 0.0);
        assert!((a.at(15, 90) - 0.5).abs() < 1e-12);
        assert_eq!(a.at(60, 90), 1.0);
        assert_eq!(KlAnneal::Off.at(0, 90), 1.0);
    }

    #[test]
    fn every_preset_resolves() {
        for name in PRESETS {
            let cfg = ObjectiveConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(ObjectiveConfig::preset("VIII").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = ObjectiveConfig { gamma1: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ObjectiveConfig { margin: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
