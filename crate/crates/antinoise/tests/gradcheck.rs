//! Finite-difference checks of the full training graphs in double
//! precision: the complete head step (two backbone passes sharing weights,
//! head used twice, train-mode batch norm) and the final cross-entropy step.

use antinoise::config::ExperimentConfig;
use antinoise::nn::Element;
use antinoise::pmal::{final_step_graph, step_k_graph, PmalModel};
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ExperimentConfig {
    ExperimentConfig {
        input_size: 32,
        k: 2,
        descriptor_dim: 8,
        restore_channels: 8,
        skip_channels: 4,
        batch_size: 2,
        ..ExperimentConfig::desk_defaults()
    }
}

fn flat_params(model: &PmalModel<f64>) -> Vec<f64> {
    model.params_flat()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Spot-checks analytic gradients of the full step-k loss against central
/// finite differences at randomly chosen parameter coordinates.
#[test]
fn full_head_step_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = PmalModel::<f64>::new(&cfg, 3, &mut rng).unwrap();
    let clean = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random::<f64>());
    let noisy = clean.mapv(|v| v + 0.05 * (rng.random::<f64>() - 0.5));
    let labels = vec![0usize, 2];

    for k in 1..=model.k() {
        let mut grads = model.zeros_like();
        let l0 = step_k_graph(&mut model, &mut grads, &clean, &noisy, &labels, k, false).unwrap();
        assert!(l0.total.is_finite());
        let analytic = flat_params(&grads);
        let base = flat_params(&model);

        let mut idx_rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for _ in 0..120 {
            let i = idx_rng.random_range(0..base.len());
            let mut plus = base.clone();
            plus[i] += h;
            model.set_params(&plus);
            let mut sink = model.zeros_like();
            let lp = step_k_graph(&mut model, &mut sink, &clean, &noisy, &labels, k, false)
                .unwrap()
                .total;
            let mut minus = base.clone();
            minus[i] -= h;
            model.set_params(&minus);
            let mut sink = model.zeros_like();
            let lm = step_k_graph(&mut model, &mut sink, &clean, &noisy, &labels, k, false)
                .unwrap()
                .total;
            model.set_params(&base);
            let numeric = (Element::to_f64(lp) - Element::to_f64(lm)) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[i], numeric));
        }
        assert!(
            max_rel < 1e-4,
            "step {k}: max relative gradient error {max_rel:.3e}"
        );
    }
}

#[test]
fn final_step_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = PmalModel::<f64>::new(&cfg, 3, &mut rng).unwrap();
    let noisy = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random::<f64>());
    let labels = vec![1usize, 0];

    let mut grads = model.zeros_like();
    final_step_graph(&mut model, &mut grads, &noisy, &labels, false).unwrap();
    let analytic = flat_params(&grads);
    let base = flat_params(&model);

    let mut idx_rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for _ in 0..120 {
        let i = idx_rng.random_range(0..base.len());
        let mut plus = base.clone();
        plus[i] += h;
        model.set_params(&plus);
        let mut sink = model.zeros_like();
        let lp = final_step_graph(&mut model, &mut sink, &noisy, &labels, false).unwrap();
        let mut minus = base.clone();
        minus[i] -= h;
        model.set_params(&minus);
        let mut sink = model.zeros_like();
        let lm = final_step_graph(&mut model, &mut sink, &noisy, &labels, false).unwrap();
        model.set_params(&base);
        let numeric = (Element::to_f64(lp) - Element::to_f64(lm)) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel:.3e}");
}
