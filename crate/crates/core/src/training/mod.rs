//! Training loop, evaluation heads and the semi-supervised sweep.

mod checkpoint;

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::analysis::{macro_metrics, AbsentClasses, ConfusionMatrix, LatentDump, Metrics};
use crate::data::{mask_labels, Dataset, Normalizer};
use crate::distributions::argmax;
use crate::error::{invalid, Error, Result};
use crate::model::layers::Forward;
use crate::model::{ModelConfig, ModelKind};
use crate::objective::{objective, Batch, ClassPrior, LossBreakdown, Noise, ObjectiveConfig, ObjectiveKind, Progress};
use crate::optim::{linear_decay, Adam, AdamConfig, WeightDecay};
use crate::tensor::Tensor;
use crate::Model32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of labels kept per class; the rest are hidden before training.
    pub labelled_fraction: f64,
    /// Load batches on the training thread instead of a prefetch thread.
    pub deterministic: bool,
    /// Micro-batches per optimiser step.
    pub accumulation_steps: usize,
    pub absent_classes: AbsentClasses,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            weight_decay: 4e-5,
            decay_mode: WeightDecay::L2,
            epochs: 40,
            seed: 0,
            labelled_fraction: 1.0,
            deterministic: false,
            accumulation_steps: 1,
            absent_classes: AbsentClasses::Exclude,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("lr, batch size, epochs and accumulation steps must be positive".into()));
        }
        if self.accumulation_steps > self.batch_size {
            return Err(Error::Config("more accumulation steps than records per batch".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0) {
            return Err(Error::Config(format!("labelled fraction {} outside (0, 1]", self.labelled_fraction)));
        }
        self.objective.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Head {
    /// Recognition model q(y|x).
    Y,
    /// Auxiliary classifier q(y|z).
    Z,
    /// Nearest class center by cosine similarity.
    Cos,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Y, Head::Z, Head::Cos];

    pub fn name(self) -> &'static str {
        match self {
            Head::Y => "Y",
            Head::Z => "Z",
            Head::Cos => "Cos",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(Head::Y),
            "z" => Ok(Head::Z),
            "cos" => Ok(Head::Cos),
            _ => Err(invalid(format!("unknown head {s:?}; expected Y, Z or Cos"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    /// Record-weighted mean of the step breakdowns.
    pub loss: LossBreakdown,
    pub step_losses: Vec<f64>,
    /// Held-out metrics per head, when an evaluation set is given.
    pub metrics: BTreeMap<Head, Metrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn step_losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.epochs.iter().flat_map(|e| e.step_losses.iter().copied())
    }
}

/// Optional inputs to [`train_with`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Evaluated after every epoch.
    pub eval: Option<&'a Dataset>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

fn check_schema(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.features != cfg.input_dim || ds.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has F={} K={}, model expects F={} K={}",
            ds.features, ds.num_classes, cfg.input_dim, cfg.num_classes
        )));
    }
    Ok(())
}

/// Normalised inputs and training labels for a set of record indices.
pub fn make_batch(ds: &Dataset, idx: &[usize], norm: &Normalizer) -> Result<Batch<f32>> {
    let (t, f) = (ds.timesteps, ds.features);
    let mut x = Vec::with_capacity(idx.len() * t * f);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let r = &ds.records[i];
        x.extend(norm.apply(&r.features));
        labels.push(r.train_label());
    }
    Batch::new(Tensor::from_vec(&[idx.len(), t, f], x), labels)
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn split_micro(idx: &[usize], parts: usize) -> Vec<&[usize]> {
    let parts = parts.min(idx.len()).max(1);
    let size = idx.len().div_ceil(parts);
    idx.chunks(size).collect()
}

#[derive(Default)]
struct LossSums {
    acc: LossBreakdown,
    records: usize,
}

impl LossSums {
    fn add(&mut self, bd: &LossBreakdown, n: usize) {
        let w = n as f64;
        let a = &mut self.acc;
        a.recon += w * bd.recon;
        a.cos_or_kl_z += w * bd.cos_or_kl_z;
        a.ce_yx += w * bd.ce_yx;
        a.ce_yz += w * bd.ce_yz;
        a.kl_yz_yx += w * bd.kl_yz_yx;
        a.kl_ycos_yx += w * bd.kl_ycos_yx;
        a.kl_yx_prior += w * bd.kl_yx_prior;
        a.total += w * bd.total;
        a.n_labelled += bd.n_labelled;
        a.n_unlabelled += bd.n_unlabelled;
        a.weights = bd.weights;
        self.records += n;
    }

    fn mean(&self) -> LossBreakdown {
        let w = 1.0 / self.records.max(1) as f64;
        let a = &self.acc;
        LossBreakdown {
            recon: a.recon * w,
            cos_or_kl_z: a.cos_or_kl_z * w,
            ce_yx: a.ce_yx * w,
            ce_yz: a.ce_yz * w,
            kl_yz_yx: a.kl_yz_yx * w,
            kl_ycos_yx: a.kl_ycos_yx * w,
            kl_yx_prior: a.kl_yx_prior * w,
            total: a.total * w,
            ..*a
        }
    }
}

/// Train on `train_ds` without per-epoch evaluation.
pub fn train(train_ds: &Dataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<(Checkpoint, RunRecord)> {
    train_with(train_ds, cfg, model_cfg, TrainHooks::default())
}

pub fn train_with(
    train_ds: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<(Checkpoint, RunRecord)> {
    let start = Instant::now();
    cfg.validate()?;
    train_ds.validate()?;
    if train_ds.is_empty() {
        return Err(invalid("empty training set"));
    }
    let ds = if cfg.labelled_fraction < 1.0 {
        mask_labels(train_ds, cfg.labelled_fraction, cfg.seed)?
    } else {
        train_ds.clone()
    };
    let mut obj = cfg.objective.clone();
    let labelled: Vec<usize> = ds.records.iter().filter_map(|r| r.train_label()).collect();
    if obj.kind == ObjectiveKind::Ptst && labelled.is_empty() {
        return Err(Error::Config("the classifier-only objective needs at least one labelled record".into()));
    }
    // an empty empirical prior is filled from the visible labels
    if matches!(&obj.prior_y, ClassPrior::Empirical(p) if p.is_empty()) {
        let mut counts = vec![0usize; ds.num_classes];
        labelled.iter().for_each(|&l| counts[l] += 1);
        obj.prior_y = ClassPrior::empirical(&counts);
    }
    let mut mcfg = model_cfg.clone();
    obj.configure_model(&mut mcfg);
    check_schema(&ds, &mcfg)?;
    if let Some(e) = hooks.eval {
        check_schema(e, &mcfg)?;
    }

    let mut model = Model32::new(mcfg.clone(), cfg.seed)?;
    let normalizer = Normalizer::fit(&ds);
    let mut adam = Adam::new(cfg.adam(), &model.store)?;
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let (d, k) = (mcfg.latent_dim, mcfg.num_classes);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);

    let mut record = RunRecord {
        seed: cfg.seed,
        config: cfg.clone(),
        model: mcfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        wall_seconds: 0.0,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let plan = batches(ds.len(), cfg.batch_size, &mut shuffle_rng);
        let mut sums = LossSums::default();
        let mut step_losses = Vec::with_capacity(plan.len());
        let lr_first = linear_decay(cfg.lr, step, total_steps);
        let mut lr_last = lr_first;

        let mut run_step = |idx: &[usize], micro: Vec<Batch<f32>>| -> Result<()> {
            let lr = linear_decay(cfg.lr, step, total_steps);
            let progress = Progress { step, total_steps };
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
            let mut step_total = 0.0;
            for b in &micro {
                let noise = Noise::sample(&mut noise_rng, b.size(), d, k);
                let frac = b.size() as f64 / idx.len() as f64;
                let seed: u64 = dropout_rng.random();
                let mut f = Forward::train(&model.store, mcfg.dropout, ChaCha8Rng::seed_from_u64(seed));
                let out = objective(&mut f, &model.net, &obj, b, &noise, progress)?;
                if !out.breakdown.total.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite loss at step {step}: {:?}", out.breakdown)));
                }
                sums.add(&out.breakdown, b.size());
                step_total += frac * out.breakdown.total;
                for (id, g) in f.g.backward(out.loss).into_params() {
                    let g = if micro.len() == 1 { g } else { g.map(|v| v * frac as f32) };
                    match &mut acc[id.index()] {
                        Some(a) => a.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            let grads: Vec<_> =
                model.store.iter().map(|(id, _)| id).zip(acc).filter_map(|(id, g)| g.map(|g| (id, g))).collect();
            adam.step(&mut model.store, &grads, lr)?;
            step_losses.push(step_total);
            lr_last = lr;
            step += 1;
            Ok(())
        };

        let build = |idx: &[usize]| -> Result<Vec<Batch<f32>>> {
            split_micro(idx, cfg.accumulation_steps).into_iter().map(|m| make_batch(&ds, m, &normalizer)).collect()
        };
        if cfg.deterministic {
            for idx in &plan {
                run_step(idx, build(idx)?)?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Vec<Batch<f32>>>>(4);
                let plan_ref = &plan;
                let build = &build;
                s.spawn(move || {
                    for idx in plan_ref {
                        if tx.send(build(idx)).is_err() {
                            break;
                        }
                    }
                });
                for idx in &plan {
                    let micro = rx.recv().map_err(|_| invalid("batch loader stopped"))??;
                    run_step(idx, micro)?;
                }
                Ok(())
            })?;
        }

        let mut metrics = BTreeMap::new();
        if let Some(eval_ds) = hooks.eval {
            let ck = Checkpoint {
                model: model.clone(),
                normalizer: normalizer.clone(),
                objective: obj.clone(),
                class_names: ds.class_names.clone(),
                timesteps: ds.timesteps,
            };
            for r in evaluate(&ck, eval_ds, cfg.absent_classes)?.heads {
                metrics.insert(r.head, r.metrics);
            }
        }
        let rec = EpochRecord {
            epoch,
            steps: plan.len(),
            lr_first,
            lr_last,
            loss: sums.mean(),
            step_losses,
            metrics,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&rec);
        }
        record.epochs.push(rec);
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    let ck =
        Checkpoint { model, normalizer, objective: obj, class_names: ds.class_names.clone(), timesteps: ds.timesteps };
    Ok((ck, record))
}

/// Per-record outputs of every available head.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub y: Vec<usize>,
    pub z: Option<Vec<usize>>,
    pub cos: Option<Vec<usize>>,
    /// Posterior means `n × D` conditioned on softmax(y_logits).
    pub mean: Option<Vec<f32>>,
    pub latent_dim: usize,
}

impl Predictions {
    pub fn head(&self, h: Head) -> Option<&[usize]> {
        match h {
            Head::Y => Some(&self.y),
            Head::Z => self.z.as_deref(),
            Head::Cos => self.cos.as_deref(),
        }
    }
}

const EVAL_CHUNK: usize = 128;

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    (0..t.rows()).map(|r| argmax(t.row(r).iter().copied())).collect()
}

/// Run every head on `ds` in evaluation mode.
pub fn predict(ck: &Checkpoint, ds: &Dataset) -> Result<Predictions> {
    let cfg = &ck.model.cfg;
    check_schema(ds, cfg)?;
    let tv = cfg.kind == ModelKind::TvPtst;
    let has_aux = ck.model.net.aux.is_some();
    let mut p = Predictions {
        y: Vec::with_capacity(ds.len()),
        z: has_aux.then(Vec::new),
        cos: tv.then(Vec::new),
        mean: tv.then(Vec::new),
        latent_dim: if tv { cfg.latent_dim } else { 0 },
    };
    let net = &ck.model.net;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let batch = make_batch(ds, idx, &ck.normalizer)?;
        let mut f = Forward::eval(&ck.model.store);
        let x = f.constant(batch.x);
        let enc = net.encode(&mut f, x);
        p.y.extend(argmax_rows(f.g.value(enc.y_logits)));
        if tv {
            let q = f.g.softmax(enc.y_logits);
            let (mean, _) = net.latent(&mut f, enc.pooled, q);
            let cos = net.cosine_scores(&mut f, mean);
            p.cos.as_mut().expect("tv").extend(argmax_rows(f.g.value(cos)));
            p.mean.as_mut().expect("tv").extend_from_slice(f.g.value(mean).data());
            if has_aux {
                let zl = net.aux(&mut f, mean);
                p.z.as_mut().expect("aux").extend(argmax_rows(f.g.value(zl)));
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: Head,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub heads: Vec<HeadReport>,
    /// Records with a label, visible or hidden.
    pub n_evaluated: usize,
}

impl Evaluation {
    pub fn head(&self, h: Head) -> Option<&HeadReport> {
        self.heads.iter().find(|r| r.head == h)
    }

    /// Fraction of records on which two heads agree, in percent.
    pub fn agreement(p: &Predictions, a: Head, b: Head) -> Option<f64> {
        let (x, y) = (p.head(a)?, p.head(b)?);
        let same = x.iter().zip(y).filter(|(u, v)| u == v).count();
        Some(100.0 * same as f64 / x.len().max(1) as f64)
    }
}

/// Metrics per head against every available label, hidden or not.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset, absent: AbsentClasses) -> Result<Evaluation> {
    let p = predict(ck, ds)?;
    evaluate_predictions(&p, ds, absent)
}

pub fn evaluate_predictions(p: &Predictions, ds: &Dataset, absent: AbsentClasses) -> Result<Evaluation> {
    let k = ds.num_classes;
    let rows: Vec<(usize, usize)> =
        ds.records.iter().enumerate().filter_map(|(i, r)| r.eval_label().map(|l| (i, l))).collect();
    if rows.is_empty() {
        return Err(invalid("no labelled records to evaluate"));
    }
    let mut heads = Vec::new();
    for h in Head::ALL {
        let Some(pred) = p.head(h) else { continue };
        let mut cm = ConfusionMatrix::new(k);
        for &(i, l) in &rows {
            cm.add(l, pred[i])?;
        }
        heads.push(HeadReport { head: h, metrics: macro_metrics(&cm, absent)?, confusion: cm });
    }
    Ok(Evaluation { heads, n_evaluated: rows.len() })
}

/// Posterior means with labels and head predictions for every record.
pub fn export_latents(ck: &Checkpoint, ds: &Dataset) -> Result<LatentDump> {
    if ck.model.cfg.kind != ModelKind::TvPtst {
        return Err(Error::UnsupportedMode("latent export needs a TV-PTST checkpoint".into()));
    }
    let p = predict(ck, ds)?;
    let n = ds.len();
    Ok(LatentDump {
        dim: p.latent_dim,
        z: p.mean.clone().expect("tv model"),
        labels: ds.records.iter().map(|r| r.eval_label()).collect(),
        predictions: (0..n).map(|i| [Some(p.y[i]), p.z.as_ref().map(|z| z[i]), p.cos.as_ref().map(|c| c[i])]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub head: Head,
    pub metrics: Metrics,
}

/// Train and evaluate once per labelled fraction.
pub fn semi_supervised_sweep(
    train_ds: &Dataset,
    test_ds: &Dataset,
    fractions: &[f64],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("labelled fraction {f} outside (0, 1]")));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let run_cfg = TrainConfig { labelled_fraction: fraction, ..cfg.clone() };
        let (ck, _) = train(train_ds, &run_cfg, model_cfg)?;
        for r in evaluate(&ck, test_ds, cfg.absent_classes)?.heads {
            rows.push(SweepRow { fraction, head: r.head, metrics: r.metrics });
        }
    }
    Ok(rows)
}

/// `fraction,head,oa,precision,recall,f1`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,head,oa,precision,recall,f1\n");
    for r in rows {
        let m = r.metrics;
        s.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2}\n",
            r.fraction,
            r.head.name(),
            m.oa,
            m.precision,
            m.recall,
            m.f1
        ));
    }
    s
}
