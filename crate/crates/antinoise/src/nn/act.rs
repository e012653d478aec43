//! Elementwise activations.

use super::Element;
use ndarray::{ArrayBase, DataMut, Dimension, OwnedRepr};

/// Rectified linear unit. Backward needs only the forward output.
pub struct Relu;

impl Relu {
    pub fn forward<E: Element, D: Dimension>(
        x: &ArrayBase<OwnedRepr<E>, D>,
    ) -> ArrayBase<OwnedRepr<E>, D> {
        x.mapv(|v| if v > E::zero() { v } else { E::zero() })
    }

    /// `y` is the forward output; gradient is passed through where y > 0.
    pub fn backward<E: Element, D: Dimension, S: DataMut<Elem = E>>(
        y: &ArrayBase<OwnedRepr<E>, D>,
        dy: &mut ArrayBase<S, D>,
    ) {
        dy.zip_mut_with(y, |d, &yv| {
            if yv <= E::zero() {
                *d = E::zero();
            }
        });
    }
}

/// Exponential linear unit with alpha = 1.
pub struct Elu;

impl Elu {
    pub fn forward<E: Element, D: Dimension>(
        x: &ArrayBase<OwnedRepr<E>, D>,
    ) -> ArrayBase<OwnedRepr<E>, D> {
        x.mapv(|v| if v > E::zero() { v } else { v.exp() - E::one() })
    }

    /// `y` is the forward output; for x <= 0, dy/dx = exp(x) = y + 1.
    pub fn backward<E: Element, D: Dimension, S: DataMut<Elem = E>>(
        y: &ArrayBase<OwnedRepr<E>, D>,
        dy: &mut ArrayBase<S, D>,
    ) {
        dy.zip_mut_with(y, |d, &yv| {
            if yv <= E::zero() {
                *d = *d * (yv + E::one());
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn elu_gradient_finite_difference() {
        let x = array![[-2.0f64, -0.3, 0.0, 0.7, 2.5]];
        let y = Elu::forward(&x);
        let mut dy = x.mapv(|_| 1.0);
        Elu::backward(&y, &mut dy);
        let h = 1e-7;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[(0, i)] += h;
            let mut xm = x.clone();
            xm[(0, i)] -= h;
            let num = (Elu::forward(&xp).sum() - Elu::forward(&xm).sum()) / (2.0 * h);
            assert!((num - dy[(0, i)]).abs() < 1e-6, "i={i}: {num} vs {}", dy[(0, i)]);
        }
    }

    #[test]
    fn relu_zeroes_negative_gradient() {
        let x = array![-1.0f32, 2.0];
        let y = Relu::forward(&x);
        let mut dy = array![5.0f32, 5.0];
        Relu::backward(&y, &mut dy);
        assert_eq!(dy, array![0.0, 5.0]);
    }
}
