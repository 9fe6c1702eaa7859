//! Train on a synthetic split and print held-out metrics per epoch.
//!
//! Usage: `cargo run --release --example synthetic_run -- [preset] [epochs] [labelled_fraction]`

use tvae_core::data::{generate_split, SyntheticConfig};
use tvae_core::model::ModelConfig;
use tvae_core::objective::ObjectiveConfig;
use tvae_core::training::{train_with, TrainConfig, TrainHooks};

fn main() -> tvae_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.first().map_or("VII", String::as_str);
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let fraction = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let (train, test) = generate_split(&SyntheticConfig::default(), 500)?;
    let cfg = TrainConfig {
        epochs,
        labelled_fraction: fraction,
        objective: ObjectiveConfig::preset(preset)?,
        ..Default::default()
    };
    let model = ModelConfig::tv_ptst(train.features, train.num_classes);
    let mut log = |e: &tvae_core::training::EpochRecord| {
        let m: Vec<String> = e.metrics.iter().map(|(h, m)| format!("{}={:.1}/{:.1}", h.name(), m.oa, m.f1)).collect();
        println!(
            "epoch {:>3} loss {:.4} recon {:.4} z {:.4} {:.1}s {}",
            e.epoch,
            e.loss.total,
            e.loss.recon,
            e.loss.cos_or_kl_z,
            e.seconds,
            m.join(" ")
        );
    };
    let hooks = TrainHooks { eval: Some(&test), on_epoch: Some(&mut log) };
    let (_, rec) = train_with(&train, &cfg, &model, hooks)?;
    println!("wall {:.1}s", rec.wall_seconds);
    Ok(())
}
