//! Experiment configuration: TOML files, resolved JSON snapshots and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tvae_core::analysis::AbsentClasses;
use tvae_core::model::{ModelConfig, SeqLen};
use tvae_core::objective::{ClassPrior, ObjectiveConfig, ObjectiveKind};
use tvae_core::optim::WeightDecay;
use tvae_core::training::TrainConfig;

pub const SEED_ENV: &str = "TVAE_SEED";

/// Everything needed to repeat a run; written as `config.resolved.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Default,
    Tiny,
}

/// Partial settings from a TOML file; every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    pub objective: Option<String>,
    #[serde(default)]
    pub data: FileData,
    #[serde(default)]
    pub train: FileTrain,
    #[serde(default)]
    pub model: FileModel,
    #[serde(default)]
    pub loss: FileLoss,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTrain {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub decoupled_weight_decay: Option<bool>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub labels_fraction: Option<f64>,
    pub deterministic: Option<bool>,
    pub accumulation_steps: Option<usize>,
    pub include_absent_classes: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileModel {
    pub size: Option<ModelSize>,
    pub latent_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub isotropic: Option<bool>,
    pub decoder_reduction: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileLoss {
    pub gamma1: Option<f64>,
    pub margin: Option<f64>,
    pub empirical_prior: Option<bool>,
}

/// Settings given on the command line; they win over the file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct TrainFlags {
    /// TOML configuration file, or a `config.resolved.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Objective family.
    #[arg(long, value_parser = ["ptst", "tvae"])]
    pub objective: Option<String>,
    /// Loss preset: I..VII, tvae, ptst, dkl-*, cos-* (with optional -part / -full).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub labels_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Apply weight decay to the weights directly instead of through the gradient.
    #[arg(long)]
    pub decoupled_weight_decay: bool,
    /// Seed; falls back to the file, then to TVAE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load batches on the training thread.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub model_size: Option<ModelSize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Use empirical class frequencies as p(y).
    #[arg(long)]
    pub empirical_prior: bool,
    /// Count classes absent from both truth and predictions in macro averages.
    #[arg(long)]
    pub include_absent_classes: bool,
}

pub fn resolve_preset(objective: Option<&str>, preset: Option<&str>) -> Result<String> {
    Ok(match (objective, preset) {
        (Some("ptst"), None | Some("ptst")) => "ptst".into(),
        (Some("ptst"), Some(p)) => bail!("preset {p:?} needs --objective tvae"),
        (Some("tvae"), Some("ptst")) => bail!("preset ptst conflicts with --objective tvae"),
        (_, Some(p)) => p.to_string(),
        (_, None) => "VII".into(),
    })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Combine defaults, an optional config file and flags (flags win).
pub fn resolve(
    flags: &TrainFlags,
    train_data: Option<PathBuf>,
    test_data: Option<PathBuf>,
    out: Option<PathBuf>,
    features: usize,
    classes: usize,
) -> Result<ExperimentConfig> {
    if let Some(path) = flags.config.as_ref().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let mut exp: ExperimentConfig =
            serde_json::from_str(&read_file(path)?).with_context(|| format!("parsing {}", path.display()))?;
        exp.train_data = train_data.or(exp.train_data);
        exp.test_data = test_data.or(exp.test_data);
        exp.out = out.unwrap_or(exp.out);
        return Ok(exp);
    }
    let file: FileConfig = match &flags.config {
        Some(p) => toml::from_str(&read_file(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => FileConfig::default(),
    };
    let preset = resolve_preset(
        flags.objective.as_deref().or(file.objective.as_deref()),
        flags.preset.as_deref().or(file.preset.as_deref()),
    )?;
    let mut objective = ObjectiveConfig::preset(&preset)?;
    if let Some(g) = flags.gamma1.or(file.loss.gamma1) {
        objective.gamma1 = g;
    }
    if let Some(m) = flags.margin.or(file.loss.margin) {
        objective.margin = m;
    }
    if flags.empirical_prior || file.loss.empirical_prior == Some(true) {
        objective.prior_y = ClassPrior::Empirical(Vec::new());
    }

    let size = flags.model_size.or(file.model.size).unwrap_or(ModelSize::Default);
    let mut model = match size {
        ModelSize::Default => ModelConfig::tv_ptst(features, classes),
        ModelSize::Tiny => ModelConfig::tiny(features, classes),
    };
    if let Some(d) = flags.latent_dim.or(file.model.latent_dim) {
        model.latent_dim = d;
    }
    if let Some(p) = file.model.dropout {
        model.dropout = p;
    }
    if let Some(i) = file.model.isotropic {
        model.isotropic = i;
    }
    if let Some(f) = file.model.decoder_reduction {
        model.decoder.seq_len = SeqLen::Reduced { factor: f };
    }
    if objective.kind == ObjectiveKind::Ptst {
        model.aux_classifier = false;
    }
    objective.configure_model(&mut model);

    let t = &file.train;
    let defaults = TrainConfig::default();
    let decoupled = flags.decoupled_weight_decay || t.decoupled_weight_decay == Some(true);
    let train = TrainConfig {
        lr: flags.lr.or(t.lr).unwrap_or(defaults.lr),
        batch_size: flags.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
        weight_decay: flags.weight_decay.or(t.weight_decay).unwrap_or(defaults.weight_decay),
        decay_mode: if decoupled { WeightDecay::Decoupled } else { WeightDecay::L2 },
        epochs: flags.epochs.or(t.epochs).unwrap_or(defaults.epochs),
        seed: match flags.seed.or(t.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(defaults.seed),
        },
        labelled_fraction: flags.labels_fraction.or(t.labels_fraction).unwrap_or(1.0),
        deterministic: flags.deterministic || t.deterministic == Some(true),
        accumulation_steps: flags.accumulation_steps.or(t.accumulation_steps).unwrap_or(1),
        absent_classes: if flags.include_absent_classes || t.include_absent_classes == Some(true) {
            AbsentClasses::Include
        } else {
            AbsentClasses::Exclude
        },
        objective,
    };
    train.validate()?;
    model.validate()?;
    let out = out.or(file.out).context("no output directory; pass --out or set `out` in the config file")?;
    Ok(ExperimentConfig {
        train_data: train_data.or(file.data.train),
        test_data: test_data.or(file.data.test),
        out,
        preset,
        model,
        train,
    })
}
