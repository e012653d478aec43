//! Batch normalization over NCHW feature maps and NC descriptors.

use super::Element;
use ndarray::{Array1, Array2, Array4, Axis};

/// How a normalization layer behaves during a forward pass.
///
/// `Train { update_running: false }` normalizes with batch statistics but
/// leaves the running estimates untouched; it is used for derived inputs
/// (re-forwarded denoised images) and for the perturbed pass of a
/// sharpness-aware step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train { update_running: bool },
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<E: Element> {
    pub gamma: Array1<E>,
    pub beta: Array1<E>,
    pub running_mean: Array1<E>,
    pub running_var: Array1<E>,
    pub eps: E,
    pub momentum: E,
}

/// Saved forward state: normalized activations plus the inverse std that was
/// used, so the backward pass works for both train and eval normalization.
pub struct Bn2dCache<E: Element> {
    pub xhat: Array4<E>,
    pub inv_std: Array1<E>,
    pub mode: NormMode,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: E::from_f64(1e-5),
            momentum: E::from_f64(0.1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            running_mean: Array1::zeros(self.gamma.len()),
            running_var: Array1::zeros(self.gamma.len()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn forward(&mut self, x: &Array4<E>, mode: NormMode) -> (Array4<E>, Bn2dCache<E>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len());
        let count = E::from_f64((n * h * w) as f64);
        let (mean, var) = match mode {
            NormMode::Train { .. } => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let m = ch.sum() / count;
                    let v = ch.fold(E::zero(), |acc, &e| acc + (e - m) * (e - m)) / count;
                    mean[ci] = m;
                    var[ci] = v;
                }
                if let NormMode::Train { update_running: true } = mode {
                    let m = self.momentum;
                    let om = E::one() - m;
                    for ci in 0..c {
                        self.running_mean[ci] = om * self.running_mean[ci] + m * mean[ci];
                        self.running_var[ci] = om * self.running_var[ci] + m * var[ci];
                    }
                }
                (mean, var)
            }
            NormMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| E::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let m = mean[ci];
            let s = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|e| (e - m) * s);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * g + b);
        }
        (y, Bn2dCache { xhat, inv_std, mode })
    }

    /// Read-only eval-mode forward (running statistics, no cache).
    pub fn infer(&self, x: &Array4<E>) -> Array4<E> {
        let c = self.gamma.len();
        let mut y = x.clone();
        for ci in 0..c {
            let m = self.running_mean[ci];
            let s = E::one() / (self.running_var[ci] + self.eps).sqrt();
            let g = self.gamma[ci];
            let b = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| (e - m) * s * g + b);
        }
        y
    }

    pub fn backward(&self, cache: &Bn2dCache<E>, dy: &Array4<E>, grad: &mut BatchNorm2d<E>) -> Array4<E> {
        let (n, c, h, w) = dy.dim();
        let count = E::from_f64((n * h * w) as f64);
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let dy_c = dy.index_axis(Axis(1), ci);
            let xhat_c = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dy_c.sum();
            let sum_dy_xhat = dy_c
                .iter()
                .zip(xhat_c.iter())
                .fold(E::zero(), |acc, (&a, &b)| acc + a * b);
            grad.gamma[ci] = grad.gamma[ci] + sum_dy_xhat;
            grad.beta[ci] = grad.beta[ci] + sum_dy;
            let g_s = self.gamma[ci] * cache.inv_std[ci];
            let mut dx_c = dx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                NormMode::Train { .. } => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xhat = sum_dy_xhat / count;
                    for ((d, &dy_v), &xh) in dx_c.iter_mut().zip(dy_c.iter()).zip(xhat_c.iter()) {
                        *d = g_s * (dy_v - mean_dy - xh * mean_dy_xhat);
                    }
                }
                NormMode::Eval => {
                    for (d, &dy_v) in dx_c.iter_mut().zip(dy_c.iter()) {
                        *d = g_s * dy_v;
                    }
                }
            }
        }
        dx
    }
}

impl<E: Element> super::Visit<E> for BatchNorm2d<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[E])) {
        f("gamma", self.gamma.as_slice().unwrap());
        f("beta", self.beta.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        f("gamma", self.gamma.as_slice_mut().unwrap());
        f("beta", self.beta.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<E: Element> {
    pub gamma: Array1<E>,
    pub beta: Array1<E>,
    pub running_mean: Array1<E>,
    pub running_var: Array1<E>,
    pub eps: E,
    pub momentum: E,
}

pub struct Bn1dCache<E: Element> {
    pub xhat: Array2<E>,
    pub inv_std: Array1<E>,
    pub mode: NormMode,
}

impl<E: Element> BatchNorm1d<E> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            eps: E::from_f64(1e-5),
            momentum: E::from_f64(0.1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            running_mean: Array1::zeros(self.gamma.len()),
            running_var: Array1::zeros(self.gamma.len()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn forward(&mut self, x: &Array2<E>, mode: NormMode) -> (Array2<E>, Bn1dCache<E>) {
        let (n, d) = x.dim();
        assert_eq!(d, self.gamma.len());
        let count = E::from_f64(n as f64);
        let (mean, var) = match mode {
            NormMode::Train { .. } => {
                let mean = x.sum_axis(Axis(0)) / count;
                let mut var = Array1::zeros(d);
                for di in 0..d {
                    let m = mean[di];
                    var[di] = x
                        .index_axis(Axis(1), di)
                        .fold(E::zero(), |acc, &e| acc + (e - m) * (e - m))
                        / count;
                }
                if let NormMode::Train { update_running: true } = mode {
                    let mo = self.momentum;
                    let om = E::one() - mo;
                    for di in 0..d {
                        self.running_mean[di] = om * self.running_mean[di] + mo * mean[di];
                        self.running_var[di] = om * self.running_var[di] + mo * var[di];
                    }
                }
                (mean, var)
            }
            NormMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| E::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for di in 0..d {
            let m = mean[di];
            let s = inv_std[di];
            xhat.index_axis_mut(Axis(1), di).mapv_inplace(|e| (e - m) * s);
        }
        let mut y = xhat.clone();
        for di in 0..d {
            let g = self.gamma[di];
            let b = self.beta[di];
            y.index_axis_mut(Axis(1), di).mapv_inplace(|e| e * g + b);
        }
        (y, Bn1dCache { xhat, inv_std, mode })
    }

    /// Read-only eval-mode forward (running statistics, no cache).
    pub fn infer(&self, x: &Array2<E>) -> Array2<E> {
        let d = self.gamma.len();
        let mut y = x.clone();
        for di in 0..d {
            let m = self.running_mean[di];
            let s = E::one() / (self.running_var[di] + self.eps).sqrt();
            let g = self.gamma[di];
            let b = self.beta[di];
            y.index_axis_mut(Axis(1), di).mapv_inplace(|e| (e - m) * s * g + b);
        }
        y
    }

    pub fn backward(&self, cache: &Bn1dCache<E>, dy: &Array2<E>, grad: &mut BatchNorm1d<E>) -> Array2<E> {
        let (n, d) = dy.dim();
        let count = E::from_f64(n as f64);
        let mut dx = Array2::zeros((n, d));
        for di in 0..d {
            let dy_c = dy.index_axis(Axis(1), di);
            let xhat_c = cache.xhat.index_axis(Axis(1), di);
            let sum_dy = dy_c.sum();
            let sum_dy_xhat = dy_c
                .iter()
                .zip(xhat_c.iter())
                .fold(E::zero(), |acc, (&a, &b)| acc + a * b);
            grad.gamma[di] = grad.gamma[di] + sum_dy_xhat;
            grad.beta[di] = grad.beta[di] + sum_dy;
            let g_s = self.gamma[di] * cache.inv_std[di];
            let mut dx_c = dx.index_axis_mut(Axis(1), di);
            match cache.mode {
                NormMode::Train { .. } => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xhat = sum_dy_xhat / count;
                    for ((dst, &dy_v), &xh) in dx_c.iter_mut().zip(dy_c.iter()).zip(xhat_c.iter()) {
                        *dst = g_s * (dy_v - mean_dy - xh * mean_dy_xhat);
                    }
                }
                NormMode::Eval => {
                    for (dst, &dy_v) in dx_c.iter_mut().zip(dy_c.iter()) {
                        *dst = g_s * dy_v;
                    }
                }
            }
        }
        dx
    }
}

impl<E: Element> super::Visit<E> for BatchNorm1d<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[E])) {
        f("gamma", self.gamma.as_slice().unwrap());
        f("beta", self.beta.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        f("gamma", self.gamma.as_slice_mut().unwrap());
        f("beta", self.beta.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn train_forward_normalizes_batch() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |_| rng.random::<f64>() * 3.0 + 1.0);
        let (y, _) = bn.forward(&x, NormMode::Train { update_running: true });
        for c in 0..2 {
            let ch = y.index_axis(Axis(1), c);
            let n = ch.len() as f64;
            let mean: f64 = ch.sum() / n;
            let var: f64 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn no_update_mode_leaves_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, i, j)| (n + i + j) as f64);
        bn.forward(&x, NormMode::Train { update_running: false });
        assert_eq!(before.0, bn.running_mean);
        assert_eq!(before.1, bn.running_var);
        bn.forward(&x, NormMode::Train { update_running: true });
        assert_ne!(before.0, bn.running_mean);
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = Array1::from_shape_fn(2, |_| rng.random::<f64>() + 0.5);
        bn.beta = Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
        // Objective: sum of squares of BN output in train mode.
        let f = |bn: &BatchNorm2d<f64>, x: &Array4<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward(x, NormMode::Train { update_running: false });
            y.iter().map(|v| v * v).sum()
        };
        let (y, cache) = bn
            .clone()
            .forward(&x, NormMode::Train { update_running: false });
        let dy = y.mapv(|v| 2.0 * v);
        let mut grad = bn.zeros_like();
        let dx = bn.backward(&cache, &dy, &mut grad);
        let h = 1e-6;
        for &idx in &[(0, 0, 0, 0), (2, 1, 1, 1), (1, 0, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&bn, &xp) - f(&bn, &xm)) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-5, "{num} vs {}", dx[idx]);
        }
        for c in 0..2 {
            let mut bp = bn.clone();
            bp.gamma[c] += h;
            let mut bm = bn.clone();
            bm.gamma[c] -= h;
            let num = (f(&bp, &x) - f(&bm, &x)) / (2.0 * h);
            assert!((num - grad.gamma[c]).abs() < 1e-5);
        }
    }
}
