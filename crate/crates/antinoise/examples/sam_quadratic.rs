//! Sharpness-aware minimization on a scalar quadratic, the smallest case
//! where the two-pass step can be followed by hand.
//!
//!   cargo run --release --example sam_quadratic

use antinoise::sam::{sam_step, SamConfig, SamState};

fn main() {
    let cfg = SamConfig {
        rho: 0.05,
        weight_decay: 0.0,
        base_lr: 0.1,
        momentum: 0.9,
        epochs: 500,
        enabled: true,
    };
    // L(w) = (w - 3)^2 / 2, starting at w = 0.
    let eval = |p: &[f64], _primary: bool| {
        let diff = p[0] - 3.0;
        Ok((0.5 * diff * diff, vec![diff]))
    };

    let mut state = SamState::new(cfg, 1);
    let mut w = vec![0.0f64];
    sam_step(&mut state, &mut w, 0.1, eval).unwrap();
    println!("first step: w = {:.6} (hand-computed oracle: 0.305)", w[0]);

    let mut state = SamState::new(cfg, 1);
    let mut w = vec![0.0f64];
    for step in 0..500 {
        sam_step(&mut state, &mut w, cfg.lr_at(step), eval).unwrap();
        if (w[0] - 3.0).abs() < 1e-4 {
            println!("|w - 3| < 1e-4 after {} annealed steps", step + 1);
            return;
        }
    }
    println!("did not converge: w = {}", w[0]);
}
