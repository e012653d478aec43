//! Max pooling (2x2 stride-2 downsample), global max and global average pooling.

use super::Element;
use ndarray::{Array2, Array4};

/// 2x2 max pool with stride 2. Input spatial sizes must be even.
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns the pooled map and, per output cell, the flat index of the
    /// winning input element (for the backward scatter).
    pub fn forward<E: Element>(x: &Array4<E>) -> (Array4<E>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "odd spatial size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = vec![0usize; n * c * oh * ow];
        let xs = x.as_slice().unwrap();
        let mut k = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = base + (2 * i) * w + 2 * j;
                        let mut best = xs[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                        y[(ni, ci, i, j)] = best;
                        arg[k] = best_idx;
                        k += 1;
                    }
                }
            }
        }
        (y, arg)
    }

    pub fn backward<E: Element>(dy: &Array4<E>, arg: &[usize], input_dim: (usize, usize, usize, usize)) -> Array4<E> {
        let mut dx = Array4::zeros(input_dim);
        let dxs = dx.as_slice_mut().unwrap();
        for (g, &idx) in dy.iter().zip(arg.iter()) {
            dxs[idx] = dxs[idx] + *g;
        }
        dx
    }
}

/// Global max pool over the spatial dimensions: `[n,c,h,w] -> [n,c]`.
pub struct GlobalMaxPool;

impl GlobalMaxPool {
    pub fn forward<E: Element>(x: &Array4<E>) -> (Array2<E>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let mut y = Array2::zeros((n, c));
        let mut arg = vec![0usize; n * c];
        let xs = x.as_slice().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut best_idx = base;
                let mut best = xs[base];
                for o in 1..h * w {
                    if xs[base + o] > best {
                        best = xs[base + o];
                        best_idx = base + o;
                    }
                }
                y[(ni, ci)] = best;
                arg[ni * c + ci] = best_idx;
            }
        }
        (y, arg)
    }

    pub fn backward<E: Element>(dy: &Array2<E>, arg: &[usize], input_dim: (usize, usize, usize, usize)) -> Array4<E> {
        let mut dx = Array4::zeros(input_dim);
        let dxs = dx.as_slice_mut().unwrap();
        for (g, &idx) in dy.iter().zip(arg.iter()) {
            dxs[idx] = dxs[idx] + *g;
        }
        dx
    }
}

/// Global average pool over the spatial dimensions: `[n,c,h,w] -> [n,c]`.
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward<E: Element>(x: &Array4<E>) -> Array2<E> {
        let (n, c, h, w) = x.dim();
        let scale = E::one() / E::from_f64((h * w) as f64);
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = E::zero();
                for i in 0..h {
                    for j in 0..w {
                        acc = acc + x[(ni, ci, i, j)];
                    }
                }
                y[(ni, ci)] = acc * scale;
            }
        }
        y
    }

    pub fn backward<E: Element>(dy: &Array2<E>, input_dim: (usize, usize, usize, usize)) -> Array4<E> {
        let (n, c, h, w) = input_dim;
        let scale = E::one() / E::from_f64((h * w) as f64);
        let mut dx = Array4::zeros(input_dim);
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[(ni, ci)] * scale;
                for i in 0..h {
                    for j in 0..w {
                        dx[(ni, ci, i, j)] = g;
                    }
                }
            }
        }
        dx
    }
}
