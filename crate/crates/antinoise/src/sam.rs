//! Sharpness-aware minimization: a two-pass step that first climbs to the
//! worst nearby loss within an L2 ball of radius rho, then descends using
//! the gradient taken at that perturbed point.
//!
//! The base update is SGD with momentum and decoupled weight decay. Each
//! optimizer instance owns momentum state for a full flat parameter vector
//! but only ever touches the index ranges it is given, so per-step parameter
//! subsets (stages on the path to a tap, plus one head) stay isolated.

use crate::error::{Error, Result};
use crate::nn::Element;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamConfig {
    /// Neighborhood radius rho of the inner maximization.
    pub rho: f64,
    /// Decoupled weight decay coefficient lambda.
    pub weight_decay: f64,
    /// Peak learning rate of the cosine schedule.
    pub base_lr: f64,
    /// Momentum of the base SGD update.
    pub momentum: f64,
    /// Total epochs of the cosine schedule.
    pub epochs: usize,
    /// When false the perturbation passes are skipped (plain SGD+momentum).
    pub enabled: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            weight_decay: 5e-4,
            base_lr: 0.002,
            momentum: 0.9,
            epochs: 200,
            enabled: true,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.rho <= 0.0 {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.weight_decay < 0.0 || self.base_lr < 0.0 {
            return Err(Error::Config("negative weight decay or learning rate".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at the given (0-based) epoch. Reaches
    /// zero at `epoch == epochs`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.base_lr;
        }
        let t = (epoch as f64 / self.epochs as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First-order solution of the inner maximization: `rho * g / ||g||_2`, with
/// the norm taken jointly over all entries. Zero gradient maps to zero.
pub fn compute_perturbation<E: Element>(gradients: &[E], rho: f64) -> Vec<E> {
    let norm = l2_norm(gradients);
    if norm == 0.0 {
        return vec![E::zero(); gradients.len()];
    }
    let scale = E::from_f64(rho / norm);
    gradients.iter().map(|&g| g * scale).collect()
}

fn l2_norm<E: Element>(v: &[E]) -> f64 {
    v.iter().map(|&g| g.to_f64() * g.to_f64()).sum::<f64>().sqrt()
}

fn l2_norm_ranges<E: Element>(v: &[E], ranges: &[Range<usize>]) -> f64 {
    let mut acc = 0.0;
    for r in ranges {
        for &g in &v[r.clone()] {
            acc += g.to_f64() * g.to_f64();
        }
    }
    acc.sqrt()
}

/// What a single optimization step produced, for logging and instrumentation.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    /// L2 norm (over the step's ranges) of the gradient used for the update.
    pub grad_norm: f64,
}

/// Momentum state for one progressive step, sized to the full flat
/// parameter vector.
pub struct SamState {
    pub cfg: SamConfig,
    momentum_buf: Vec<f64>,
    pub update_count: u64,
}

impl SamState {
    pub fn new(cfg: SamConfig, param_len: usize) -> Self {
        Self { cfg, momentum_buf: vec![0.0; param_len], update_count: 0 }
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buf
    }

    pub fn momentum_buffer_mut(&mut self) -> &mut Vec<f64> {
        &mut self.momentum_buf
    }

    /// One sharpness-aware update of `params` restricted to `ranges`.
    ///
    /// `eval` must be callable twice on the same batch: once at the current
    /// parameters and once at the perturbed ones. `primary` is true exactly
    /// once per step, on the unperturbed pass, so callers can gate
    /// batch-norm running-statistics updates on it.
    pub fn step<E, F>(
        &mut self,
        params: &mut [E],
        ranges: &[Range<usize>],
        lr: f64,
        step_index: usize,
        mut eval: F,
    ) -> Result<StepOutcome>
    where
        E: Element,
        F: FnMut(&[E], bool) -> Result<(E, Vec<E>)>,
    {
        let (loss0, grad0) = eval(params, true)?;
        if !loss0.to_f64().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step_index,
                detail: format!("loss {}", loss0.to_f64()),
            });
        }
        debug_assert_eq!(grad0.len(), params.len());

        let grad_for_update = if self.cfg.enabled {
            let norm = l2_norm_ranges(&grad0, ranges);
            if norm == 0.0 {
                grad0
            } else {
                let scale = E::from_f64(self.cfg.rho / norm);
                // Climb to w + eps, re-evaluate, then restore w.
                for r in ranges {
                    for i in r.clone() {
                        params[i] = params[i] + grad0[i] * scale;
                    }
                }
                let (loss1, grad1) = eval(params, false)?;
                for r in ranges {
                    for i in r.clone() {
                        params[i] = params[i] - grad0[i] * scale;
                    }
                }
                if !loss1.to_f64().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step_index,
                        detail: format!("perturbed loss {}", loss1.to_f64()),
                    });
                }
                grad1
            }
        } else {
            grad0
        };

        let grad_norm = l2_norm_ranges(&grad_for_update, ranges);
        let mu = self.cfg.momentum;
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for r in ranges {
            for i in r.clone() {
                let g = grad_for_update[i].to_f64();
                let m = mu * self.momentum_buf[i] + g;
                self.momentum_buf[i] = m;
                let w = params[i].to_f64() * decay - lr * m;
                params[i] = E::from_f64(w);
            }
        }
        self.update_count += 1;
        Ok(StepOutcome { loss: loss0.to_f64(), grad_norm })
    }
}

/// Convenience wrapper for whole-vector steps (tests and scalar problems).
pub fn sam_step<E, F>(
    state: &mut SamState,
    params: &mut Vec<E>,
    lr: f64,
    eval: F,
) -> Result<StepOutcome>
where
    E: Element,
    F: FnMut(&[E], bool) -> Result<(E, Vec<E>)>,
{
    let all = [0..params.len()];
    state.step(params, &all, lr, 0, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_cfg(enabled: bool) -> SamConfig {
        SamConfig {
            rho: 0.05,
            weight_decay: 0.0,
            base_lr: 0.1,
            momentum: 0.9,
            epochs: 100,
            enabled,
        }
    }

    #[test]
    fn zero_gradient_gives_zero_perturbation() {
        let eps = compute_perturbation(&[0.0f64, 0.0, 0.0], 0.05);
        assert!(eps.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn scalar_quadratic_perturbation() {
        // L(w) = w^2 at w=1: g = 2, eps = rho * g/|g| = 0.05.
        let eps = compute_perturbation(&[2.0f64], 0.05);
        assert!((eps[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn perturbation_norm_equals_rho() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g: Vec<f64> = (0..37).map(|_| rng.random::<f64>() - 0.5).collect();
            let rho = rng.random::<f64>() + 0.01;
            let eps = compute_perturbation(&g, rho);
            let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
            assert!((norm - rho).abs() / rho < 1e-9);
        }
    }

    /// Scalar oracle, worked by hand before the implementation:
    /// L(w) = (w-3)^2/2, w0 = 0, rho = 0.05, lr = 0.1.
    /// g0 = -3, eps = 0.05 * (-3)/3 = -0.05, g1 = (w0+eps) - 3 = -3.05,
    /// delta_w = -lr * g1 = +0.305.
    #[test]
    fn quadratic_first_step_matches_hand_oracle() {
        let mut state = SamState::new(quadratic_cfg(true), 1);
        let mut w = vec![0.0f64];
        let eval = |p: &[f64], _primary: bool| {
            let diff = p[0] - 3.0;
            Ok((0.5 * diff * diff, vec![diff]))
        };
        sam_step(&mut state, &mut w, 0.1, eval).unwrap();
        assert!((w[0] - 0.305).abs() < 1e-9, "w = {}", w[0]);
    }

    #[test]
    fn quadratic_converges_within_500_steps() {
        // Constant-rate sharpness-aware steps orbit the minimizer at radius
        // ~lr*rho; the scheduled (annealed) rate contracts the orbit.
        let cfg = SamConfig { epochs: 500, base_lr: 0.1, ..quadratic_cfg(true) };
        let mut state = SamState::new(cfg, 1);
        let mut w = vec![0.0f64];
        for step in 0..500 {
            let eval = |p: &[f64], _: bool| {
                let diff = p[0] - 3.0;
                Ok((0.5 * diff * diff, vec![diff]))
            };
            sam_step(&mut state, &mut w, cfg.lr_at(step), eval).unwrap();
            if (w[0] - 3.0).abs() < 1e-4 {
                return;
            }
        }
        panic!("no convergence: w = {}", w[0]);
    }

    #[test]
    fn vanishing_rho_reduces_to_gradient_descent() {
        let mut cfg = quadratic_cfg(true);
        cfg.rho = 1e-12;
        let mut sam_state = SamState::new(cfg, 1);
        let mut plain_state = SamState::new(quadratic_cfg(false), 1);
        let mut w_sam = vec![0.0f64];
        let mut w_plain = vec![0.0f64];
        let eval = |p: &[f64], _: bool| {
            let diff = p[0] - 3.0;
            Ok((0.5 * diff * diff, vec![diff]))
        };
        sam_step(&mut sam_state, &mut w_sam, 0.1, eval).unwrap();
        sam_step(&mut plain_state, &mut w_plain, 0.1, eval).unwrap();
        assert!((w_sam[0] - w_plain[0]).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoint_is_zero() {
        let cfg = SamConfig { base_lr: 0.002, epochs: 200, ..SamConfig::default() };
        assert!((cfg.lr_at(0) - 0.002).abs() < 1e-12);
        assert!(cfg.lr_at(200) < 1e-12);
        assert!(cfg.lr_at(100) > 0.0);
    }

    #[test]
    fn constant_loss_changes_weights_only_by_decay() {
        let cfg = SamConfig {
            rho: 0.05,
            weight_decay: 0.01,
            base_lr: 0.1,
            momentum: 0.9,
            epochs: 10,
            enabled: true,
        };
        let mut state = SamState::new(cfg, 2);
        let mut w = vec![2.0f64, -4.0];
        let eval = |_: &[f64], _: bool| Ok((1.0f64, vec![0.0, 0.0]));
        sam_step(&mut state, &mut w, 0.1, eval).unwrap();
        assert!((w[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
        assert!((w[1] - -4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_reports_step_index() {
        let mut state = SamState::new(quadratic_cfg(true), 1);
        let mut w = vec![0.0f64];
        let eval = |_: &[f64], _: bool| Ok((f64::NAN, vec![1.0]));
        let err = state.step(&mut w, &[0..1], 0.1, 7, eval).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, .. } => assert_eq!(step, 7),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ranges_mask_the_update() {
        let mut state = SamState::new(quadratic_cfg(true), 3);
        let mut w = vec![1.0f64, 1.0, 1.0];
        // Gradient on every coordinate, but only [0..1] may move.
        let eval = |p: &[f64], _: bool| Ok((p.iter().sum::<f64>(), vec![1.0, 1.0, 1.0]));
        state.step(&mut w, &[0..1], 0.1, 0, eval).unwrap();
        assert!(w[0] < 1.0);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[2], 1.0);
    }

    /// Over random strictly convex quadratics the perturbed gradient should
    /// almost always stay a descent direction.
    #[test]
    fn perturbed_gradient_remains_descent_direction() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let dim = 10;
        let mut positive = 0;
        for _ in 0..100 {
            // A = B^T B + I, L(w) = 0.5 (w-c)^T A (w-c); grad = A (w-c).
            let b: Vec<Vec<f64>> = (0..dim)
                .map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect();
            let mut a = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                for j in 0..dim {
                    let mut acc = if i == j { 1.0 } else { 0.0 };
                    for k in 0..dim {
                        acc += b[k][i] * b[k][j];
                    }
                    a[i][j] = acc;
                }
            }
            let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let w: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let grad = |w: &[f64]| -> Vec<f64> {
                (0..dim)
                    .map(|i| (0..dim).map(|j| a[i][j] * (w[j] - c[j])).sum())
                    .collect()
            };
            let g0 = grad(&w);
            let eps = compute_perturbation(&g0, 0.05);
            let w1: Vec<f64> = w.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let g1 = grad(&w1);
            let dot: f64 = g0.iter().zip(&g1).map(|(a, b)| a * b).sum();
            if dot > 0.0 {
                positive += 1;
            }
        }
        assert!(positive >= 95, "descent direction held in only {positive}/100 cases");
    }
}
