//! Fully-connected layer.

use super::Element;
use ndarray::{linalg::general_mat_mul, Array1, Array2, Axis};

/// `y = x W^T + b` with `x: [n, in]`, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Element> {
    pub weight: Array2<E>,
    pub bias: Array1<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(weight: Array2<E>, bias: Array1<E>) -> Self {
        assert_eq!(weight.dim().0, bias.len());
        Self { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: &Array2<E>) -> Array2<E> {
        let (n, d) = x.dim();
        let (out, din) = self.weight.dim();
        assert_eq!(d, din, "linear input dim {d} != weight {din}");
        let mut y = Array2::zeros((n, out));
        general_mat_mul(E::one(), x, &self.weight.t(), E::zero(), &mut y);
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&self, x: &Array2<E>, dy: &Array2<E>, grad: &mut Linear<E>) -> Array2<E> {
        // dW += dy^T x ; db += sum_rows(dy) ; dx = dy W
        general_mat_mul(E::one(), &dy.t(), x, E::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(E::one(), dy, &self.weight, E::zero(), &mut dx);
        dx
    }
}

impl<E: Element> super::Visit<E> for Linear<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[E])) {
        f("weight", self.weight.as_slice().unwrap());
        f("bias", self.bias.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        f("weight", self.weight.as_slice_mut().unwrap());
        f("bias", self.bias.as_slice_mut().unwrap());
    }
}
