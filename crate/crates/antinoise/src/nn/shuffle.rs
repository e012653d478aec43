//! Sub-pixel convolution rearrangement (pixel shuffle).
//!
//! Rearranges channel blocks into spatial resolution:
//! `[n, c, h, w] -> [n, c/(sh*sw), h*sh, w*sw]` where
//! `out[n][o][i*sh + a][j*sw + b] = in[n][o*sh*sw + a*sw + b][i][j]`.
//! The map is a bijection on elements, so the backward pass is its inverse.

use super::Element;
use ndarray::Array4;

#[derive(Debug, Clone, Copy)]
pub struct PixelShuffle {
    pub sh: usize,
    pub sw: usize,
}

impl PixelShuffle {
    pub fn new(sh: usize, sw: usize) -> Self {
        assert!(sh >= 1 && sw >= 1);
        Self { sh, sw }
    }

    pub fn out_dim(&self, dim: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (n, c, h, w) = dim;
        let s = self.sh * self.sw;
        assert!(c % s == 0, "channels {c} not divisible by shuffle factor {s}");
        (n, c / s, h * self.sh, w * self.sw)
    }

    pub fn forward<E: Element>(&self, x: &Array4<E>) -> Array4<E> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = self.out_dim(x.dim());
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for a in 0..self.sh {
                    for b in 0..self.sw {
                        let ci = o * self.sh * self.sw + a * self.sw + b;
                        for i in 0..h {
                            for j in 0..w {
                                y[(ni, o, i * self.sh + a, j * self.sw + b)] = x[(ni, ci, i, j)];
                            }
                        }
                    }
                }
            }
        }
        let _ = c;
        y
    }

    pub fn backward<E: Element>(&self, dy: &Array4<E>, input_dim: (usize, usize, usize, usize)) -> Array4<E> {
        let (n, c, h, w) = input_dim;
        let mut dx = Array4::zeros(input_dim);
        let oc = c / (self.sh * self.sw);
        for ni in 0..n {
            for o in 0..oc {
                for a in 0..self.sh {
                    for b in 0..self.sw {
                        let ci = o * self.sh * self.sw + a * self.sw + b;
                        for i in 0..h {
                            for j in 0..w {
                                dx[(ni, ci, i, j)] = dy[(ni, o, i * self.sh + a, j * self.sw + b)];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent index-map oracle: computes the destination coordinate of
    /// every input element by arithmetic alone, without running the kernel.
    fn oracle_positions(
        dim: (usize, usize, usize, usize),
        sh: usize,
        sw: usize,
    ) -> Vec<((usize, usize, usize, usize), (usize, usize, usize, usize))> {
        let (n, c, h, w) = dim;
        let mut map = Vec::new();
        for ni in 0..n {
            for ci in 0..c {
                let o = ci / (sh * sw);
                let r = ci % (sh * sw);
                let (a, b) = (r / sw, r % sw);
                for i in 0..h {
                    for j in 0..w {
                        map.push(((ni, ci, i, j), (ni, o, i * sh + a, j * sw + b)));
                    }
                }
            }
        }
        map
    }

    #[test]
    fn forward_matches_index_oracle() {
        let ps = PixelShuffle::new(2, 2);
        let x = Array4::from_shape_fn((2, 8, 3, 5), |(n, c, i, j)| {
            (n * 1000 + c * 100 + i * 10 + j) as f64
        });
        let y = ps.forward(&x);
        assert_eq!(y.dim(), (2, 2, 6, 10));
        for (src, dst) in oracle_positions(x.dim(), 2, 2) {
            assert_eq!(y[dst], x[src]);
        }
    }

    #[test]
    fn backward_inverts_forward() {
        let ps = PixelShuffle::new(3, 2);
        let x = Array4::from_shape_fn((1, 12, 2, 2), |(_, c, i, j)| (c * 7 + i * 3 + j) as f32);
        let y = ps.forward(&x);
        let back = ps.backward(&y, x.dim());
        assert_eq!(back, x);
    }
}
