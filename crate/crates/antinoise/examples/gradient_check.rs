//! Finite-difference check of a full head training step in f64.
//!
//!   cargo run --release --example gradient_check

use antinoise::config::ExperimentConfig;
use antinoise::nn::Element;
use antinoise::pmal::{step_k_graph, PmalModel};
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ExperimentConfig {
        input_size: 32,
        k: 1,
        descriptor_dim: 8,
        restore_channels: 8,
        skip_channels: 4,
        ..ExperimentConfig::desk_defaults()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = PmalModel::<f64>::new(&cfg, 3, &mut rng).unwrap();
    let clean = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random::<f64>());
    let noisy = clean.mapv(|v| v + 0.05 * (rng.random::<f64>() - 0.5));
    let labels = vec![0usize, 2];

    let mut grads = model.zeros_like();
    let loss = step_k_graph(&mut model, &mut grads, &clean, &noisy, &labels, 1, false).unwrap();
    println!("loss = {:.6}", Element::to_f64(loss.total));

    let analytic = grads.params_flat();
    let base = model.params_flat();
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut idx_rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let i = idx_rng.random_range(0..base.len());
        let mut plus = base.clone();
        plus[i] += h;
        model.set_params(&plus);
        let mut sink = model.zeros_like();
        let lp = step_k_graph(&mut model, &mut sink, &clean, &noisy, &labels, 1, false)
            .unwrap()
            .total;
        let mut minus = base.clone();
        minus[i] -= h;
        model.set_params(&minus);
        let mut sink = model.zeros_like();
        let lm = step_k_graph(&mut model, &mut sink, &clean, &noisy, &labels, 1, false)
            .unwrap()
            .total;
        model.set_params(&base);
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    println!("checked {checked} random coordinates, max relative error {max_rel:.3e}");
    assert!(max_rel < 1e-4);
    println!("gradients agree with central finite differences");
}
