//! Loss functions and the PSNR metric.

use super::Element;
use ndarray::{Array2, Axis};

/// Softmax cross-entropy, averaged over the batch.
/// Returns the loss and the gradient w.r.t. the logits.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Array2<E>,
    labels: &[usize],
) -> (E, Array2<E>) {
    let (n, k) = logits.dim();
    assert_eq!(labels.len(), n);
    let inv_n = E::one() / E::from_f64(n as f64);
    let mut grad = Array2::zeros((n, k));
    let mut loss = E::zero();
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let y = labels[i];
        assert!(y < k, "label {y} out of range for {k} classes");
        let max = row.fold(row[0], |a, &b| if b > a { b } else { a });
        let mut sum = E::zero();
        for &z in row.iter() {
            sum = sum + (z - max).exp();
        }
        let lse = max + sum.ln();
        loss = loss + (lse - row[y]) * inv_n;
        for (j, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad[(i, j)] = (p - if j == y { E::one() } else { E::zero() }) * inv_n;
        }
    }
    (loss, grad)
}

/// Mean squared error over all elements of two equally-shaped arrays.
pub fn mse<E: Element, D: ndarray::Dimension>(
    a: &ndarray::Array<E, D>,
    b: &ndarray::Array<E, D>,
) -> E {
    assert_eq!(a.shape(), b.shape());
    let n = E::from_f64(a.len() as f64);
    a.iter()
        .zip(b.iter())
        .fold(E::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        / n
}

/// Gradient of `mse(a, b)` with respect to `a`: `2 (a - b) / numel`.
pub fn mse_grad<E: Element, D: ndarray::Dimension>(
    a: &ndarray::Array<E, D>,
    b: &ndarray::Array<E, D>,
) -> ndarray::Array<E, D> {
    let scale = E::from_f64(2.0 / a.len() as f64);
    let mut g = a.clone();
    g.zip_mut_with(b, |x, &y| *x = (*x - y) * scale);
    g
}

/// Sentinel for the PSNR of identical images (the true value is infinite).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB, with peak value 1.0 and capped at
/// [`PSNR_CAP_DB`] for (near-)identical inputs.
pub fn psnr<E: Element, D: ndarray::Dimension>(
    a: &ndarray::Array<E, D>,
    b: &ndarray::Array<E, D>,
) -> f64 {
    let m = mse(a, b).to_f64();
    if m <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * m.log10()).min(PSNR_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = array![[0.3f64, 0.3, 0.3, 0.3]];
        let (loss, _) = softmax_cross_entropy(&logits, &[2]);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_finite_difference() {
        let logits = array![[0.2f64, -1.0, 0.7], [1.5, 0.1, -0.4]];
        let labels = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-7;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[(i, j)] += h;
                let mut lm = logits.clone();
                lm[(i, j)] -= h;
                let num = (softmax_cross_entropy(&lp, &labels).0
                    - softmax_cross_entropy(&lm, &labels).0)
                    / (2.0 * h);
                assert!((num - grad[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_offset_mse() {
        let a = Array3::from_elem((3, 4, 4), 0.6f64);
        let b = Array3::from_elem((3, 4, 4), 0.5f64);
        assert!((mse(&a, &b) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_loop_and_caps_identity() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Array1::from_shape_fn(100, |_| rng.random::<f64>());
        let b = Array1::from_shape_fn(100, |_| rng.random::<f64>());
        // Independent scalar implementation.
        let mut acc = 0.0;
        for i in 0..100 {
            let d: f64 = a[i] - b[i];
            acc += d * d;
        }
        let expect = -10.0 * (acc / 100.0).log10();
        assert!((psnr(&a, &b) - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
    }
}
