//! PTST encoder, TV-PTST latent heads, decoder, auxiliary classifier and class centers.
//!
//! Layer structs only hold [`ParamId`]s, so one [`Network`] layout serves any
//! scalar type. [`Model`] pairs the layout with a typed [`ParamStore`].

pub mod layers;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{invalid, Error, Result};
use crate::graph::{conv_out_len, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use layers::{Block, Builder, Forward, Linear, PatchEmbed, ScaleNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch: usize,
    pub stride: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub expansion: usize,
}

impl StageConfig {
    pub const fn new(
        patch: usize,
        stride: usize,
        channels: usize,
        layers: usize,
        heads: usize,
        expansion: usize,
    ) -> Self {
        Self { patch, stride, channels, layers, heads, expansion }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.patch >= self.stride && self.stride >= 1) {
            return Err(Error::Config(format!("stage needs P >= S >= 1, got P={} S={}", self.patch, self.stride)));
        }
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("C={} not divisible by H={}", self.channels, self.heads)));
        }
        if self.layers == 0 || self.expansion == 0 {
            return Err(Error::Config("L and E must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        conv_out_len(t_in, self.patch, self.stride, self.patch / 2)
    }
}

/// Decoder output length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqLen {
    /// Decode all T steps directly.
    Input,
    /// Decode `ceil(T / factor)` steps, then nearest-neighbour upsample.
    Reduced { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub expansion: usize,
    pub layers: usize,
    /// Rows of the learnable position table.
    pub max_len: usize,
    pub seq_len: SeqLen,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: 128, heads: 8, expansion: 1, layers: 4, max_len: 128, seq_len: SeqLen::Input }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentersMode {
    Learnable,
    FixedOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder and recognition head only.
    Ptst,
    /// Encoder plus latent heads, decoder, centers and optional auxiliary classifier.
    TvPtst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub stages: Vec<StageConfig>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub decoder: DecoderConfig,
    pub centers_mode: CentersMode,
    pub aux_classifier: bool,
    /// One shared log σ per sample instead of one per latent dimension.
    pub isotropic: bool,
    /// Learnable temperature scaling cosine scores into logits.
    pub cos_temperature: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn default_stages() -> Vec<StageConfig> {
        vec![
            StageConfig::new(3, 2, 32, 1, 2, 1),
            StageConfig::new(3, 2, 64, 1, 4, 1),
            StageConfig::new(3, 2, 128, 1, 8, 1),
            StageConfig::new(3, 2, 256, 1, 16, 1),
        ]
    }

    pub fn ptst(input_dim: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Ptst, aux_classifier: false, ..Self::tv_ptst(input_dim, num_classes) }
    }

    pub fn tv_ptst(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::TvPtst,
            stages: Self::default_stages(),
            input_dim,
            num_classes,
            latent_dim: 256,
            decoder: DecoderConfig::default(),
            centers_mode: CentersMode::Learnable,
            aux_classifier: true,
            isotropic: false,
            cos_temperature: false,
            dropout: 0.0,
        }
    }

    /// Small configuration used for gradient checks.
    pub fn tiny(input_dim: usize, num_classes: usize) -> Self {
        Self {
            stages: vec![StageConfig::new(3, 2, 8, 1, 2, 1); 4],
            latent_dim: 16,
            decoder: DecoderConfig {
                channels: 8,
                heads: 2,
                expansion: 1,
                layers: 2,
                max_len: 32,
                seq_len: SeqLen::Input,
            },
            ..Self::tv_ptst(input_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("need F >= 1 and K >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kind == ModelKind::TvPtst {
            if self.latent_dim == 0 {
                return Err(Error::Config("latent dimension must be >= 1".into()));
            }
            if self.centers_mode == CentersMode::FixedOrthonormal && self.latent_dim < self.num_classes {
                return Err(Error::Config(format!(
                    "fixed orthonormal centers need D >= K, got D={} K={}",
                    self.latent_dim, self.num_classes
                )));
            }
            let d = &self.decoder;
            d.validate_stage()?;
            if d.max_len == 0 {
                return Err(Error::Config("decoder position table must have rows".into()));
            }
            if let SeqLen::Reduced { factor } = d.seq_len {
                if factor == 0 {
                    return Err(Error::Config("reduction factor must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Token counts after each stage.
    pub fn pyramid_lengths(&self, t: usize) -> Vec<usize> {
        self.stages
            .iter()
            .scan(t, |len, s| {
                *len = s.out_len(*len);
                Some(*len)
            })
            .collect()
    }
}

impl DecoderConfig {
    fn validate_stage(&self) -> Result<()> {
        StageConfig::new(1, 1, self.channels, self.layers, self.heads, self.expansion).validate()
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: ScaleNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    pub head: Linear,
}

/// Conditional Gaussian heads for q(z | x, y).
#[derive(Debug, Clone)]
pub struct LatentHeads {
    pub embed_y: Linear,
    pub mean: Linear,
    pub log_std: Linear,
    pub isotropic: bool,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub proj_z: Linear,
    pub proj_y: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: ScaleNorm,
    pub out: Linear,
    pub max_len: usize,
    pub seq_len: SeqLen,
}

/// Two-layer perceptron q(y | z).
#[derive(Debug, Clone)]
pub struct AuxClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassCenters {
    pub id: ParamId,
    pub mode: CentersMode,
}

/// Layer layout of the full model.
#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: Encoder,
    pub heads: Option<LatentHeads>,
    pub decoder: Option<Decoder>,
    pub aux: Option<AuxClassifier>,
    pub centers: Option<ClassCenters>,
    pub cos_temperature: Option<ParamId>,
}

/// Initial value of the cosine-logit temperature.
pub const COS_TEMPERATURE_INIT: f64 = 10.0;

/// Encoder outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub pooled: Var,
    pub y_logits: Var,
}

impl Network {
    fn build<S: Scalar>(cfg: &ModelConfig, bld: &mut Builder<'_, S>) -> Result<Self> {
        let mut cin = cfg.input_dim;
        let mut stages = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            let stage = bld.scope(&format!("encoder.stage{i}"), |b| Stage {
                embed: PatchEmbed::new(b, cin, s.channels, s.patch, s.stride),
                blocks: (0..s.layers)
                    .map(|l| Block::new(b, &format!("block{l}"), s.channels, s.heads, s.expansion))
                    .collect(),
                norm: ScaleNorm::new(b, "norm", s.channels),
            });
            stages.push(stage);
            cin = s.channels;
        }
        let c4 = cfg.final_channels();
        let k = cfg.num_classes;
        let head = bld.scope("encoder", |b| Linear::new(b, "head", c4, k, true));
        let encoder = Encoder { stages, head };
        if cfg.kind == ModelKind::Ptst {
            return Ok(Network {
                encoder,
                heads: None,
                decoder: None,
                aux: None,
                centers: None,
                cos_temperature: None,
            });
        }

        let d = cfg.latent_dim;
        let heads = bld.scope("heads", |b| LatentHeads {
            embed_y: Linear::new(b, "embed_y", k, c4, false),
            mean: Linear::new(b, "mean", 2 * c4, d, true),
            log_std: Linear::new(b, "log_std", 2 * c4, if cfg.isotropic { 1 } else { d }, true),
            isotropic: cfg.isotropic,
        });
        let dc = &cfg.decoder;
        let decoder = bld.scope("decoder", |b| {
            let proj_z = Linear::new(b, "proj_z", d, dc.channels, true);
            let proj_y = Linear::new(b, "proj_y", k, dc.channels, true);
            let pos = Tensor::randn(&[dc.max_len, dc.channels], 0.02, b.rng);
            let pos = b.add("pos", pos, true);
            Decoder {
                proj_z,
                proj_y,
                pos,
                blocks: (0..dc.layers)
                    .map(|l| Block::new(b, &format!("block{l}"), dc.channels, dc.heads, dc.expansion))
                    .collect(),
                norm: ScaleNorm::new(b, "norm", dc.channels),
                out: Linear::new(b, "out", dc.channels, cfg.input_dim, true),
                max_len: dc.max_len,
                seq_len: dc.seq_len,
            }
        });
        let aux = cfg.aux_classifier.then(|| {
            bld.scope("aux", |b| AuxClassifier {
                fc1: Linear::new(b, "fc1", d, d, true),
                fc2: Linear::new(b, "fc2", d, k, true),
            })
        });
        let value = init_class_centers::<S>(cfg.centers_mode, k, d, bld.rng)?;
        let trainable = cfg.centers_mode == CentersMode::Learnable;
        let centers = ClassCenters { id: bld.add("centers", value, trainable), mode: cfg.centers_mode };
        let cos_temperature =
            cfg.cos_temperature.then(|| bld.add("cos_temperature", Tensor::scalar(S::of(COS_TEMPERATURE_INIT)), true));
        Ok(Network {
            encoder,
            heads: Some(heads),
            decoder: Some(decoder),
            aux,
            centers: Some(centers),
            cos_temperature,
        })
    }

    /// `x: [B, T, F]` to pooled final-stage features and recognition logits.
    pub fn encode<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Encoded {
        let mut h = x;
        for stage in &self.encoder.stages {
            h = stage.embed.forward(f, h);
            for block in &stage.blocks {
                h = block.forward(f, h);
            }
            h = stage.norm.forward(f, h);
        }
        let pooled = f.g.mean_time(h);
        let y_logits = self.encoder.head.forward(f, pooled);
        Encoded { pooled, y_logits }
    }

    /// Mean and clamped log σ of q(z | x, y), both `[B, D]`.
    pub fn latent<S: Scalar>(&self, f: &mut Forward<'_, S>, pooled: Var, y_cond: Var) -> (Var, Var) {
        let heads = self.heads.as_ref().expect("latent heads require a TV-PTST model");
        let ey = heads.embed_y.forward(f, y_cond);
        let h = f.g.concat(pooled, ey);
        let mean = heads.mean.forward(f, h);
        let log_std = heads.log_std.forward(f, h);
        let log_std = f.g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let log_std = if heads.isotropic {
            let d = f.g.shape(mean)[1];
            let ones = f.constant(Tensor::full(&[1, d], S::one()));
            f.g.matmul(log_std, ones, false, false)
        } else {
            log_std
        };
        (mean, log_std)
    }

    /// `z: [B, D]`, `y_cond: [B, K]` to `x̂: [B, t, F]`.
    pub fn decode<S: Scalar>(&self, f: &mut Forward<'_, S>, z: Var, y_cond: Var, t: usize) -> Result<Var> {
        let dec = self.decoder.as_ref().expect("decoder requires a TV-PTST model");
        let t_dec = match dec.seq_len {
            SeqLen::Input => t,
            SeqLen::Reduced { factor } => t.div_ceil(factor),
        };
        if t == 0 || t_dec > dec.max_len {
            return Err(invalid(format!("decoder length {t_dec} outside 1..={}", dec.max_len)));
        }
        let pz = dec.proj_z.forward(f, z);
        let py = dec.proj_y.forward(f, y_cond);
        let base = f.g.add(pz, py);
        let tokens = f.g.repeat_time(base, t_dec);
        let pos = f.p(dec.pos);
        let pos = f.g.slice_rows(pos, t_dec);
        let mut h = f.g.add_suffix(tokens, pos);
        for block in &dec.blocks {
            h = block.forward(f, h);
        }
        h = dec.norm.forward(f, h);
        let out = dec.out.forward(f, h);
        Ok(if t_dec == t {
            out
        } else {
            let idx = (0..t).map(|i| (i * t_dec / t).min(t_dec - 1)).collect();
            f.g.gather_time(out, idx)
        })
    }

    /// Auxiliary logits q(y | z), `[B, K]`.
    pub fn aux<S: Scalar>(&self, f: &mut Forward<'_, S>, z: Var) -> Var {
        let aux = self.aux.as_ref().expect("model has no auxiliary classifier");
        let h = aux.fc1.forward(f, z);
        let h = f.g.gelu(h);
        aux.fc2.forward(f, h)
    }

    /// Cosine similarity of every row of `z` with every class center, `[B, K]`.
    pub fn cosine_scores<S: Scalar>(&self, f: &mut Forward<'_, S>, z: Var) -> Var {
        let c = self.centers.as_ref().expect("class centers require a TV-PTST model");
        let centers = f.p(c.id);
        let zn = f.g.l2_normalize(z);
        let cn = f.g.l2_normalize(centers);
        f.g.matmul(zn, cn, false, true)
    }
}

/// Fixed mode: QR-orthonormal rows. Learnable mode: unit-norm Gaussian rows.
pub fn init_class_centers<S: Scalar>(mode: CentersMode, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
    let raw = Tensor::<f64>::randn(&[k, d], 1.0, rng);
    let rows: Vec<f64> = match mode {
        CentersMode::FixedOrthonormal => {
            if k > d {
                return Err(invalid(format!("cannot place {k} orthonormal centers in {d} dimensions")));
            }
            // columns of Q span the rows of the random matrix
            let m = DMatrix::from_row_slice(k, d, raw.data()).transpose();
            let q = m.qr().q();
            (0..k).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| q[(c, r)]).collect()
        }
        CentersMode::Learnable => {
            let mut v = raw.into_vec();
            for row in v.chunks_exact_mut(d) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|x| *x /= n);
            }
            v
        }
    };
    Ok(Tensor::from_f64(&[k, d], &rows))
}

/// Parameter counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub latent_heads: usize,
    pub decoder: usize,
    pub aux: usize,
    /// Trainable center entries; fixed centers count as zero.
    pub centers: usize,
    pub total: usize,
}

/// A network layout with its parameters.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub net: Network,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&cfg, &mut Builder::new(&mut store, &mut rng))?;
        Ok(Self { cfg, net, store })
    }

    /// Same layout and values in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { cfg: self.cfg.clone(), net: self.net.clone(), store: self.store.cast() }
    }

    pub fn param_count(&self) -> ParamCount {
        let count = |prefix: &str| self.store.count_trainable(prefix);
        let (encoder, latent_heads, decoder, aux) =
            (count("encoder."), count("heads."), count("decoder."), count("aux."));
        let centers = count("centers");
        let other = count("cos_temperature");
        ParamCount {
            encoder,
            latent_heads,
            decoder,
            aux,
            centers,
            total: encoder + latent_heads + decoder + aux + centers + other,
        }
    }

    /// Current class centers `[K, D]`.
    pub fn centers(&self) -> Option<&Tensor<S>> {
        self.net.centers.as_ref().map(|c| &self.store.get(c.id).value)
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.cfg.input_dim || s[1] == 0 {
            return Err(invalid(format!("expected [B, T, {}] input, got {s:?}", self.cfg.input_dim)));
        }
        if !x.is_finite() {
            return Err(invalid("non-finite input"));
        }
        Ok(())
    }

    /// Pooled features `[B, C4]` and recognition logits `[B, K]`.
    pub fn encoder_forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_input(x)?;
        let mut f = Forward::eval(&self.store);
        let xv = f.constant(x.clone());
        let e = self.net.encode(&mut f, xv);
        Ok((f.g.value(e.pooled).clone(), f.g.value(e.y_logits).clone()))
    }

    /// Mean and log σ of q(z | x, y) for given pooled features and class vectors.
    pub fn latent_heads(&self, pooled: &Tensor<S>, y_cond: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        self.require_tv()?;
        let mut f = Forward::eval(&self.store);
        let (p, y) = (f.constant(pooled.clone()), f.constant(y_cond.clone()));
        let (m, s) = self.net.latent(&mut f, p, y);
        Ok((f.g.value(m).clone(), f.g.value(s).clone()))
    }

    pub fn decoder_forward(&self, z: &Tensor<S>, y_cond: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        self.require_tv()?;
        let mut f = Forward::eval(&self.store);
        let (zv, y) = (f.constant(z.clone()), f.constant(y_cond.clone()));
        let out = self.net.decode(&mut f, zv, y, t)?;
        Ok(f.g.value(out).clone())
    }

    pub fn aux_classifier(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if self.net.aux.is_none() {
            return Err(Error::UnsupportedMode("model was built without an auxiliary classifier".into()));
        }
        let mut f = Forward::eval(&self.store);
        let zv = f.constant(z.clone());
        let out = self.net.aux(&mut f, zv);
        Ok(f.g.value(out).clone())
    }

    pub fn cosine_scores(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        self.require_tv()?;
        let mut f = Forward::eval(&self.store);
        let zv = f.constant(z.clone());
        let out = self.net.cosine_scores(&mut f, zv);
        Ok(f.g.value(out).clone())
    }

    fn require_tv(&self) -> Result<()> {
        if self.cfg.kind == ModelKind::TvPtst {
            Ok(())
        } else {
            Err(Error::UnsupportedMode("operation needs a TV-PTST model".into()))
        }
    }
}
