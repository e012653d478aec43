//! Accuracy-versus-noise sweep comparing a noise-trained model against a
//! plain baseline, writing `robustness.csv` and `robustness.png`.
//!
//!   cargo run --release --example robustness -- [epochs] [out_dir]

use antinoise::config::{derive_seed, ExperimentConfig};
use antinoise::data::make_toy_dataset;
use antinoise::eval::{default_sigma_sweep, robustness_curve, write_robustness_artifacts};
use antinoise::pmal::{make_optimizers, pmal_train, PmalModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let out: PathBuf = std::env::args()
        .nth(2)
        .map(Into::into)
        .unwrap_or_else(|| "robustness_out".into());
    let (train, test) = make_toy_dataset(4, 25, 64, 1).split_per_class(20, 5)?;

    let mut train_variant = |name: &str, cfg: &ExperimentConfig| -> anyhow::Result<PmalModel<f32>> {
        println!("training {name} ({} epochs)...", cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let mut model = PmalModel::<f32>::new(cfg, train.num_classes(), &mut rng)?;
        let mut opts = make_optimizers(&model, cfg.sam_config(), false);
        pmal_train(&mut model, &mut opts, &train, &test, cfg, 0, |_| Ok(()))?;
        Ok(model)
    };

    let anti = ExperimentConfig { epochs, lr: 0.02, ..ExperimentConfig::desk_defaults() };
    let plain = ExperimentConfig { k: 0, sigma: 0.0, no_sam: true, ..anti.clone() };
    let anti_model = train_variant("anti-noise (K=3, SAM)", &anti)?;
    let plain_model = train_variant("plain baseline", &plain)?;

    let sweep = default_sigma_sweep();
    let curves = vec![
        robustness_curve(&anti_model, &test, &sweep, 0, 16, "anti_noise")?,
        robustness_curve(&plain_model, &test, &sweep, 0, 16, "plain")?,
    ];
    for c in &curves {
        print!("{:<12}", c.model_id);
        for (s, a) in c.sigmas.iter().zip(c.accuracies.iter()) {
            print!("  s={s:.2}:{a:.2}");
        }
        println!();
    }
    write_robustness_artifacts(&curves, &out)?;
    println!("artifacts in {}", out.display());
    Ok(())
}
