//! Trains briefly, then exports clean / noisy / per-head denoised image
//! groups with PSNR statistics.
//!
//!   cargo run --release --example denoise_dump -- [epochs] [out_dir]

use antinoise::config::{derive_seed, ExperimentConfig};
use antinoise::data::make_toy_dataset;
use antinoise::eval::export_denoised;
use antinoise::pmal::{make_optimizers, pmal_train, PmalModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let out: PathBuf = std::env::args()
        .nth(2)
        .map(Into::into)
        .unwrap_or_else(|| "denoised_out".into());
    let cfg = ExperimentConfig { epochs, lr: 0.02, ..ExperimentConfig::desk_defaults() };
    let (train, test) = make_toy_dataset(4, 25, 64, 1).split_per_class(20, 5)?;

    println!("training {} epochs at sigma {}...", cfg.epochs, cfg.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut model = PmalModel::<f32>::new(&cfg, train.num_classes(), &mut rng)?;
    let mut opts = make_optimizers(&model, cfg.sam_config(), false);
    pmal_train(&mut model, &mut opts, &train, &test, &cfg, 0, |_| Ok(()))?;

    let images: Vec<_> = test.images.iter().take(4).cloned().collect();
    let report = export_denoised(&mut model, &images, cfg.sigma, cfg.seed, &out)?;
    for r in &report {
        print!("image {:>2}: noisy {:.2} dB, denoised", r.index, r.noisy_db);
        for (k, d) in r.denoised_db.iter().enumerate() {
            print!("  head{} {:.2} dB", k + 1, d);
        }
        println!();
    }
    println!("image groups written to {}", out.display());
    Ok(())
}
