//! Short progressive anti-noise training run on the toy dataset. Each batch
//! takes K+1 optimizer steps: one per head (shallow to deep) on fresh noise,
//! then one for the whole backbone.
//!
//!   cargo run --release --example train_pmal -- [epochs]

use antinoise::config::{derive_seed, ExperimentConfig};
use antinoise::data::make_toy_dataset;
use antinoise::eval::evaluate_accuracy;
use antinoise::pmal::{make_optimizers, pmal_train, PmalModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let cfg = ExperimentConfig {
        epochs,
        lr: 0.02,
        ..ExperimentConfig::desk_defaults()
    };
    let (train, test) = make_toy_dataset(4, 25, 64, 1).split_per_class(20, 5)?;
    println!(
        "toy dataset: {} train / {} test images, {} classes",
        train.len(),
        test.len(),
        train.num_classes()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut model = PmalModel::<f32>::new(&cfg, train.num_classes(), &mut rng)?;
    let mut opts = make_optimizers(&model, cfg.sam_config(), cfg.single_step);
    println!(
        "model: K = {}, {} parameters, {} optimizer steps per batch",
        model.k(),
        model.param_len(),
        model.k() + 1
    );

    pmal_train(&mut model, &mut opts, &train, &test, &cfg, 0, |st| {
        println!(
            "epoch {:>3}  lr {:.5}  l_rec_1 {:.3}  l_mse_1 {:.4}  l_ce {:.3}  train {:.3}  val {:.3}",
            st.epoch,
            st.row.get("lr").unwrap_or(f64::NAN),
            st.row.get("l_rec_1").unwrap_or(f64::NAN),
            st.row.get("l_mse_1").unwrap_or(f64::NAN),
            st.row.get("l_ce").unwrap_or(f64::NAN),
            st.row.get("train_acc").unwrap_or(f64::NAN),
            st.row.get("val_acc").unwrap_or(f64::NAN),
        );
        Ok(())
    })?;

    let acc = evaluate_accuracy(&model, &test, 0.0, cfg.seed, cfg.batch_size)?;
    println!("clean test accuracy of the averaged prediction: {acc:.3}");
    Ok(())
}
