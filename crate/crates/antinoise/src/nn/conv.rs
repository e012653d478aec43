//! 2D convolution with stride 1 and same-padding, via im2col + GEMM.

use super::Element;
use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis};
use rayon::prelude::*;

/// Convolution layer, NCHW layout, stride 1, zero same-padding.
/// Weight is `[out, in, kh, kw]`; odd kernel sizes only.
#[derive(Debug, Clone)]
pub struct Conv2d<E: Element> {
    pub weight: Array4<E>,
    pub bias: Array1<E>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(weight: Array4<E>, bias: Array1<E>) -> Self {
        let (out, _, kh, kw) = weight.dim();
        assert_eq!(bias.len(), out);
        assert!(kh % 2 == 1 && kw % 2 == 1, "even kernels unsupported");
        Self { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    /// Forward pass over a batch, parallel over samples.
    pub fn forward(&self, x: &Array4<E>) -> Array4<E> {
        let (n, c, h, w) = x.dim();
        let (out, cin, kh, kw) = self.weight.dim();
        assert_eq!(c, cin, "conv input channels {c} != weight {cin}");
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out, cin * kh * kw))
            .unwrap();
        let mut y = Array4::zeros((n, out, h, w));
        let samples: Vec<(ArrayView3<E>, ArrayViewMut3<E>)> = x
            .axis_iter(Axis(0))
            .zip(y.axis_iter_mut(Axis(0)))
            .collect();
        samples.into_par_iter().for_each(|(xs, mut ys)| {
            let cols = im2col(&xs, kh, kw);
            let mut y_mat = ys
                .view_mut()
                .into_shape_with_order((out, h * w))
                .unwrap();
            general_mat_mul(E::one(), &w_mat, &cols.view(), E::zero(), &mut y_mat);
            for (o, mut row) in y_mat.axis_iter_mut(Axis(0)).enumerate() {
                let b = self.bias[o];
                row.mapv_inplace(|v| v + b);
            }
        });
        y
    }

    /// Backward pass. Accumulates weight/bias gradients into `grad` and
    /// returns the gradient w.r.t. the input. The cross-sample reduction is
    /// done sequentially in index order so results are deterministic.
    pub fn backward(&self, x: &Array4<E>, dy: &Array4<E>, grad: &mut Conv2d<E>) -> Array4<E> {
        let (n, c, h, w) = x.dim();
        let (out, cin, kh, kw) = self.weight.dim();
        assert_eq!(dy.dim(), (n, out, h, w));
        let k = cin * kh * kw;
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out, k))
            .unwrap();

        let mut dx = Array4::zeros((n, c, h, w));
        let jobs: Vec<(ArrayView3<E>, ArrayView3<E>, ArrayViewMut3<E>)> = x
            .axis_iter(Axis(0))
            .zip(dy.axis_iter(Axis(0)))
            .zip(dx.axis_iter_mut(Axis(0)))
            .map(|((a, b), c)| (a, b, c))
            .collect();
        let per_sample: Vec<(Array2<E>, Array1<E>)> = jobs
            .into_par_iter()
            .map(|(xs, dys, mut dxs)| {
                let cols = im2col(&xs, kh, kw);
                let dy_mat = dys.into_shape_with_order((out, h * w)).unwrap();
                // dW_s = dy_mat · cols^T
                let mut dw = Array2::zeros((out, k));
                general_mat_mul(E::one(), &dy_mat, &cols.t(), E::zero(), &mut dw);
                let db = dy_mat.sum_axis(Axis(1));
                // dcols = W^T · dy_mat, then scatter back to the input.
                let mut dcols = Array2::zeros((k, h * w));
                general_mat_mul(E::one(), &w_mat.t(), &dy_mat, E::zero(), &mut dcols);
                col2im_into(&dcols, kh, kw, &mut dxs);
                (dw, db)
            })
            .collect();
        let mut gw = grad
            .weight
            .view_mut()
            .into_shape_with_order((out, k))
            .unwrap();
        for (dw, db) in per_sample {
            gw += &dw;
            grad.bias += &db;
        }
        dx
    }
}

/// For one kernel offset and output row, the overlapping span: output
/// columns `x0..x1` read input columns `(x0 + j - pw)..`.
#[inline]
fn span(j: usize, pw: usize, w: usize) -> (usize, usize) {
    let x0 = pw.saturating_sub(j);
    let x1 = (w + pw).saturating_sub(j).min(w);
    (x0, x1)
}

/// Unfold one sample `[c, h, w]` into `[c*kh*kw, h*w]` with zero same-padding.
/// Interior spans are contiguous in both source and destination.
pub fn im2col<E: Element>(x: &ArrayView3<E>, kh: usize, kw: usize) -> Array2<E> {
    let (c, h, w) = x.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut cols = Array2::zeros((c * kh * kw, h * w));
    let xs = x.as_slice().expect("contiguous feature map");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst_base = row * h * w;
                let (x0, x1) = span(j, pw, w);
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + sy as usize) * w + x0 + j - pw;
                    let dst = dst_base + y * w + x0;
                    cs[dst..dst + (x1 - x0)]
                        .copy_from_slice(&xs[src_base..src_base + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Fold `[c*kh*kw, h*w]` column gradients back onto one sample, adding into `dx`.
fn col2im_into<E: Element>(dcols: &Array2<E>, kh: usize, kw: usize, dx: &mut ArrayViewMut3<E>) {
    let (c, h, w) = dx.dim();
    let (ph, pw) = (kh / 2, kw / 2);
    let ds = dcols.as_slice().expect("contiguous columns");
    let out = dx.as_slice_mut().expect("contiguous gradient");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src_base = row * h * w;
                let (x0, x1) = span(j, pw, w);
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + sy as usize) * w + x0 + j - pw;
                    let src = src_base + y * w + x0;
                    for o in 0..(x1 - x0) {
                        out[dst_base + o] = out[dst_base + o] + ds[src + o];
                    }
                }
            }
        }
    }
}

impl<E: Element> super::Visit<E> for Conv2d<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[E])) {
        f("weight", self.weight.as_slice().unwrap());
        f("bias", self.bias.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        f("weight", self.weight.as_slice_mut().unwrap());
        f("bias", self.bias.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    #[test]
    fn identity_kernel_passes_input_through() {
        // 1x1 kernel with weight 1 on a single channel is the identity.
        let w = Array4::from_shape_vec((1, 1, 1, 1), vec![1.0f64]).unwrap();
        let conv = Conv2d::new(w, array![0.0]);
        let x = Array4::from_shape_fn((2, 1, 3, 3), |(n, _, i, j)| (n * 9 + i * 3 + j) as f64);
        let y = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let w = Array4::from_shape_fn((4, 3, 3, 3), |(o, i, a, b)| {
            0.01 * (o + i + a + b) as f64
        });
        let conv = Conv2d::new(w, Array1::zeros(4));
        let x = Array4::from_shape_fn((1, 3, 5, 7), |(_, c, i, j)| (c + i * j) as f64);
        assert_eq!(conv.forward(&x).dim(), (1, 4, 5, 7));
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.random::<f64>() - 0.5);
        let b = Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5);
        let conv = Conv2d::new(w, b);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random::<f64>() - 0.5);
        // Scalar objective: sum of squares of the output.
        let y = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &dy, &mut grad);

        let f = |conv: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            conv.forward(x).iter().map(|v| v * v).sum()
        };
        let h = 1e-6;
        // Spot-check a few input coordinates.
        for &idx in &[(0, 0, 0, 0), (1, 2, 3, 1), (0, 1, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&conv, &xp) - f(&conv, &xm)) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-5, "dx at {idx:?}: {num} vs {}", dx[idx]);
        }
        // And a few weight coordinates.
        for &idx in &[(0, 0, 0, 0), (1, 2, 2, 2), (0, 1, 1, 0)] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let num = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
            assert!(
                (num - grad.weight[idx]).abs() < 1e-5,
                "dw at {idx:?}: {num} vs {}",
                grad.weight[idx]
            );
        }
        let mut cp = conv.clone();
        cp.bias[1] += h;
        let mut cm = conv.clone();
        cm.bias[1] -= h;
        let num = (f(&cp, &x) - f(&cm, &x)) / (2.0 * h);
        assert!((num - grad.bias[1]).abs() < 1e-5);
    }
}
