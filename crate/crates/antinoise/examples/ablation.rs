//! Miniature training-strategy ablation: baseline vs K sweep vs single-step
//! vs sharpness-aware, with mean accuracy and 95% confidence intervals over
//! matched-seed repeats. Scaled down to finish quickly; raise epochs and
//! repeats for a real run.
//!
//!   cargo run --release --example ablation -- [epochs] [repeats]

use antinoise::config::ExperimentConfig;
use antinoise::data::make_toy_dataset;
use antinoise::eval::{default_ablation_grid, run_ablation};

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let repeats: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(2);
    let base = ExperimentConfig {
        input_size: 32,
        epochs,
        lr: 0.02,
        descriptor_dim: 64,
        restore_channels: 16,
        skip_channels: 8,
        ..ExperimentConfig::desk_defaults()
    };
    let (train, test) = make_toy_dataset(4, 15, 32, 1).split_per_class(12, 3)?;
    let cells = default_ablation_grid(&base);
    println!("running {} cells x {repeats} repeats at {epochs} epochs...", cells.len());
    let results = run_ablation(&cells, &train, &test, repeats, None)?;
    for r in &results {
        match (r.mean, &r.error) {
            (Some(m), _) => println!(
                "{:<16} {:.3} +- {:.3}",
                r.name,
                m,
                r.ci95.unwrap_or(0.0)
            ),
            (None, Some(e)) => println!("{:<16} failed: {e}", r.name),
            _ => {}
        }
    }
    Ok(())
}
