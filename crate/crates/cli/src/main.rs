//! `tvae`: synthesize data, train, evaluate, analyze and run ablations.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use tvae_core::analysis::{param_count, AbsentClasses, LatentDump};
use tvae_core::data::{generate_split, read_dataset, write_dataset, Dataset, SyntheticConfig};
use tvae_core::model::{ModelConfig, ModelKind, ParamCount};
use tvae_core::objective::ObjectiveConfig;
use tvae_core::training::{
    evaluate_predictions, export_latents, predict, semi_supervised_sweep, sweep_csv, train_with, Checkpoint,
    EpochRecord, Evaluation, Head, Predictions, TrainHooks,
};

use config::{resolve, resolve_preset, ExperimentConfig, ModelSize, TrainFlags};

#[derive(Parser)]
#[command(name = "tvae", version, about = "Tampered-VAE time-series classifier experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and test sets.
    Synthesize(SynthArgs),
    /// Train a model and write its checkpoint and run record.
    Train(TrainArgs),
    /// Per-head metrics and confusion matrices of a checkpoint.
    Evaluate(EvalArgs),
    /// Latent export, PCA variance ratios and parameter counts.
    Analyze(AnalyzeArgs),
    /// Train and evaluate at several labelled fractions.
    Sweep(SweepArgs),
    /// Train and evaluate several loss presets.
    Ablate(AblateArgs),
    /// Print trainable parameter counts per module.
    Params(ParamsArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    parcels: usize,
    #[arg(long, default_value_t = 500)]
    test_parcels: usize,
    #[arg(long, default_value_t = 64)]
    timesteps: usize,
    #[arg(long, default_value_t = 4)]
    bands: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    /// Evaluated after every epoch and at the end.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated heads (Y, Z, Cos); defaults to every head the checkpoint has.
    #[arg(long, value_delimiter = ',')]
    heads: Vec<String>,
    #[arg(long)]
    include_absent_classes: bool,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    components: usize,
    /// Also write `latents.csv`.
    #[arg(long)]
    csv: bool,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.6,0.4,0.2")]
    fractions: Vec<f64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV,V,VI,VII")]
    presets: Vec<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(clap::Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 8)]
    input_dim: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, value_parser = ["ptst", "tvae"], default_value = "ptst")]
    objective: String,
    #[arg(long, value_enum, default_value = "default")]
    model_size: ModelSize,
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!("{} is in use by another run (remove {} if that run is gone)", dir.display(), path.display())
        })?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn print_params(c: &ParamCount) {
    println!(
        "parameters: encoder {}  latent heads {}  decoder {}  aux {}  centers {}  total {}",
        c.encoder, c.latent_heads, c.decoder, c.aux, c.centers, c.total
    );
}

fn log_epoch(e: &EpochRecord) {
    let heads: Vec<String> =
        e.metrics.iter().map(|(h, m)| format!("{} oa {:.2} f1 {:.2}", h.name(), m.oa, m.f1)).collect();
    eprintln!(
        "epoch {:>3}  loss {:.4}  lr {:.2e}  {:.1}s  {}",
        e.epoch,
        e.loss.total,
        e.lr_last,
        e.seconds,
        heads.join("  ")
    );
}

fn metrics_json(ev: &Evaluation, p: &Predictions) -> serde_json::Value {
    let heads: BTreeMap<&str, _> = ev.heads.iter().map(|h| (h.head.name(), h.metrics)).collect();
    let mut agreement = BTreeMap::new();
    for (a, b) in [(Head::Y, Head::Z), (Head::Y, Head::Cos), (Head::Z, Head::Cos)] {
        if let Some(v) = Evaluation::agreement(p, a, b) {
            agreement.insert(format!("{}-{}", a.name(), b.name()), v);
        }
    }
    json!({ "n_evaluated": ev.n_evaluated, "heads": heads, "agreement": agreement })
}

fn write_evaluation(out: &Path, ev: &Evaluation, p: &Predictions, class_names: &[String]) -> Result<()> {
    write_json(&out.join("metrics.json"), &metrics_json(ev, p))?;
    for h in &ev.heads {
        write_text(
            &out.join(format!("confusion_{}.csv", h.head.name().to_lowercase())),
            &h.confusion.to_csv(class_names),
        )?;
    }
    for h in &ev.heads {
        let m = h.metrics;
        println!(
            "{:<4} oa {:6.2}  precision {:6.2}  recall {:6.2}  f1 {:6.2}",
            h.head.name(),
            m.oa,
            m.precision,
            m.recall,
            m.f1
        );
    }
    Ok(())
}

fn keep_heads(p: &mut Predictions, heads: &[Head]) {
    if !heads.contains(&Head::Z) {
        p.z = None;
    }
    if !heads.contains(&Head::Cos) {
        p.cos = None;
    }
}

fn synthesize(a: SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => std::env::var(config::SEED_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(7),
    };
    let cfg = SyntheticConfig {
        num_classes: a.classes,
        timesteps: a.timesteps,
        bands: a.bands,
        n_parcels: a.parcels,
        noise_sigma: a.noise.unwrap_or(SyntheticConfig::default().noise_sigma),
        seed,
        ..Default::default()
    };
    cfg.validate()?;
    let _lock = OutputLock::acquire(&a.out)?;
    let (train, test) = generate_split(&cfg, a.test_parcels)?;
    write_dataset(&train, &a.out.join("train.sits"))?;
    write_dataset(&test, &a.out.join("test.sits"))?;
    write_json(&a.out.join("config.resolved.json"), &json!({ "synthetic": cfg, "test_parcels": a.test_parcels }))?;
    println!("wrote {} train and {} test parcels to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn experiment(
    flags: &TrainFlags,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(ExperimentConfig, Dataset, Option<Dataset>)> {
    // the schema comes from the training data, which may itself be named in the config file
    let probe = resolve(flags, train.clone(), test.clone(), out.clone().or(Some(PathBuf::from("."))), 1, 2)?;
    let train_path = probe.train_data.clone().context("no training data; pass --train or set data.train")?;
    let train_ds = load(&train_path)?;
    let exp = resolve(flags, train, test, out, train_ds.features, train_ds.num_classes)?;
    let test_ds = exp.test_data.as_deref().map(load).transpose()?;
    Ok((exp, train_ds, test_ds))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (exp, train_ds, test_ds) = experiment(&a.flags, a.train, a.test, a.out)?;
    let _lock = OutputLock::acquire(&exp.out)?;
    write_json(&exp.out.join("config.resolved.json"), &exp)?;
    let mut model_cfg = exp.model.clone();
    exp.train.objective.configure_model(&mut model_cfg);
    print_params(&param_count(&model_cfg)?);
    let mut log = |e: &EpochRecord| log_epoch(e);
    let hooks = TrainHooks { eval: test_ds.as_ref(), on_epoch: Some(&mut log) };
    let (ck, rec) = train_with(&train_ds, &exp.train, &exp.model, hooks)?;
    ck.save(&exp.out.join("model.tvck"))?;
    write_text(&exp.out.join("run.jsonl"), &rec.to_jsonl()?)?;
    if let Some(test) = &test_ds {
        let p = predict(&ck, test)?;
        let ev = evaluate_predictions(&p, test, exp.train.absent_classes)?;
        write_evaluation(&exp.out, &ev, &p, &ck.class_names)?;
    }
    println!("checkpoint written to {}", exp.out.join("model.tvck").display());
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load(&a.data)?;
    let heads: Vec<Head> = if a.heads.is_empty() {
        Head::ALL.to_vec()
    } else {
        a.heads.iter().map(|h| Head::parse(h)).collect::<tvae_core::Result<_>>()?
    };
    let tv = ck.model.cfg.kind == ModelKind::TvPtst;
    for h in &heads {
        let available = match h {
            Head::Y => true,
            Head::Z => ck.model.net.aux.is_some(),
            Head::Cos => tv,
        };
        if !available && !a.heads.is_empty() {
            return Err(tvae_core::Error::UnsupportedMode(format!(
                "head {} is not available in this checkpoint",
                h.name()
            ))
            .into());
        }
    }
    let _lock = OutputLock::acquire(&a.out)?;
    let absent = if a.include_absent_classes { AbsentClasses::Include } else { AbsentClasses::Exclude };
    write_json(
        &a.out.join("config.resolved.json"),
        &json!({ "checkpoint": a.checkpoint, "data": a.data, "heads": heads, "absent_classes": absent }),
    )?;
    let mut p = predict(&ck, &ds)?;
    keep_heads(&mut p, &heads);
    let ev = evaluate_predictions(&p, &ds, absent)?;
    write_evaluation(&a.out, &ev, &p, &ck.class_names)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load(&a.data)?;
    let dump: LatentDump = export_latents(&ck, &ds)?;
    let _lock = OutputLock::acquire(&a.out)?;
    write_json(
        &a.out.join("config.resolved.json"),
        &json!({ "checkpoint": a.checkpoint, "data": a.data, "components": a.components, "csv": a.csv }),
    )?;
    dump.write(&a.out.join("latents.bin"))?;
    if a.csv {
        write_text(&a.out.join("latents.csv"), &dump.to_csv())?;
    }
    let ratios = dump.pca(a.components.min(dump.dim))?;
    let mut csv = String::from("component,ratio,cumulative\n");
    let mut cum = 0.0;
    println!("component  ratio   cumulative");
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        csv.push_str(&format!("{},{r:.6},{cum:.6}\n", i + 1));
        println!("{:>9}  {r:.4}  {cum:.4}", i + 1);
    }
    write_text(&a.out.join("pca.csv"), &csv)?;
    let counts = ck.model.param_count();
    print_params(&counts);
    write_json(&a.out.join("params.json"), &counts)?;
    let p = predict(&ck, &ds)?;
    let ev = evaluate_predictions(&p, &ds, AbsentClasses::Exclude)?;
    write_evaluation(&a.out, &ev, &p, &ck.class_names)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (exp, train_ds, test_ds) = experiment(&a.flags, a.train, a.test, a.out)?;
    let test_ds = test_ds.context("the sweep needs --test")?;
    let _lock = OutputLock::acquire(&exp.out)?;
    write_json(&exp.out.join("config.resolved.json"), &json!({ "experiment": exp, "fractions": a.fractions }))?;
    let rows = semi_supervised_sweep(&train_ds, &test_ds, &a.fractions, &exp.train, &exp.model)?;
    let csv = sweep_csv(&rows);
    write_text(&exp.out.join("sweep.csv"), &csv)?;
    write_json(&exp.out.join("sweep.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    if a.flags.preset.is_some() || a.flags.objective.is_some() {
        bail!("ablate takes --presets, not --preset or --objective");
    }
    let (exp, train_ds, test_ds) = experiment(&a.flags, a.train, a.test, a.out)?;
    let test_ds = test_ds.context("the ablation needs --test")?;
    let _lock = OutputLock::acquire(&exp.out)?;
    let mut runs = Vec::new();
    for name in &a.presets {
        let preset = resolve_preset(None, Some(name))?;
        let mut train = exp.train.clone();
        let base = ObjectiveConfig::preset(&preset)?;
        train.objective = ObjectiveConfig {
            gamma1: train.objective.gamma1,
            margin: train.objective.margin,
            prior_y: train.objective.prior_y.clone(),
            ..base
        };
        let mut model: ModelConfig = exp.model.clone();
        train.objective.configure_model(&mut model);
        runs.push((preset, train, model));
    }
    write_json(&exp.out.join("config.resolved.json"), &json!({ "experiment": exp, "presets": a.presets }))?;
    let mut csv = String::from("preset,head,oa,precision,recall,f1\n");
    for (preset, train, model) in &runs {
        eprintln!("preset {preset}");
        let mut log = |e: &EpochRecord| log_epoch(e);
        let hooks = TrainHooks { eval: None, on_epoch: Some(&mut log) };
        let (ck, rec) = train_with(&train_ds, train, model, hooks)?;
        let dir = exp.out.join(preset);
        fs::create_dir_all(&dir)?;
        write_text(&dir.join("run.jsonl"), &rec.to_jsonl()?)?;
        let p = predict(&ck, &test_ds)?;
        let ev = evaluate_predictions(&p, &test_ds, train.absent_classes)?;
        write_json(&dir.join("metrics.json"), &metrics_json(&ev, &p))?;
        for h in &ev.heads {
            let m = h.metrics;
            csv.push_str(&format!(
                "{preset},{},{:.2},{:.2},{:.2},{:.2}\n",
                h.head.name(),
                m.oa,
                m.precision,
                m.recall,
                m.f1
            ));
        }
    }
    write_text(&exp.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let mut cfg = match a.model_size {
        ModelSize::Default => ModelConfig::tv_ptst(a.input_dim, a.classes),
        ModelSize::Tiny => ModelConfig::tiny(a.input_dim, a.classes),
    };
    let obj = if a.objective == "ptst" { ObjectiveConfig::ptst() } else { ObjectiveConfig::default() };
    obj.configure_model(&mut cfg);
    let c = param_count(&cfg)?;
    print_params(&c);
    println!("{}", serde_json::to_string(&c)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Params(a) => cmd_params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
