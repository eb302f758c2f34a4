use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Token-mixing matrix of a 2-D wrap-around convolution on a row-major grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBias {
    /// `n × n` with `n = grid_h · grid_w`.
    pub c: Matrix,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: Matrix,
}

impl ConvBias {
    pub fn tokens(&self) -> usize {
        self.c.rows()
    }

    /// `(n + 1) × (n + 1)` with a leading class token that sits outside the
    /// grid: it sees only itself, weighted by the kernel's center.
    pub fn with_class_token(&self) -> Matrix {
        let n = self.tokens();
        let (kh, kw) = self.kernel.shape();
        let mut out = Matrix::zeros(n + 1, n + 1);
        out[(0, 0)] = self.kernel[(kh / 2, kw / 2)];
        for i in 0..n {
            out.row_mut(i + 1)[1..].copy_from_slice(self.c.row(i));
        }
        out
    }

    /// Bias sized for `tokens` rows: the bare matrix or its class-token padding.
    pub fn for_tokens(&self, tokens: usize) -> Result<Matrix> {
        let n = self.tokens();
        if tokens == n {
            Ok(self.c.clone())
        } else if tokens == n + 1 {
            Ok(self.with_class_token())
        } else {
            Err(Error::Shape(format!(
                "convolution bias covers {n} grid tokens, sequence has {tokens}"
            )))
        }
    }
}

/// Builds the doubly-block circulant matrix: row `t` carries the kernel
/// weights at the wrapped 2-D offsets around token `t`. Offsets that wrap
/// onto the same token accumulate.
pub fn conv_bias_matrix(grid_h: usize, grid_w: usize, kernel: &Matrix) -> Result<ConvBias> {
    let (kh, kw) = kernel.shape();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("kernel sides must be odd, got {kh}x{kw}")));
    }
    if grid_h == 0 || grid_w == 0 || kh > grid_h || kw > grid_w {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} does not fit a {grid_h}x{grid_w} grid"
        )));
    }
    let n = grid_h * grid_w;
    let (ch, cw) = (kh / 2, kw / 2);
    let mut c = Matrix::zeros(n, n);
    for r in 0..grid_h {
        for col in 0..grid_w {
            let t = r * grid_w + col;
            for i in 0..kh {
                for j in 0..kw {
                    let rr = (r + grid_h + i - ch) % grid_h;
                    let cc = (col + grid_w + j - cw) % grid_w;
                    c[(t, rr * grid_w + cc)] += kernel[(i, j)];
                }
            }
        }
    }
    Ok(ConvBias {
        c,
        grid_h,
        grid_w,
        kernel: kernel.clone(),
    })
}

/// 3×3 kernel with `8/9` at the center and `−1/9` on the eight neighbors.
pub fn difference_kernel() -> Matrix {
    let mut k = Matrix::filled(3, 3, -1.0 / 9.0);
    k[(1, 1)] = 8.0 / 9.0;
    k
}

/// Elementwise absolute value of a kernel.
pub fn abs_kernel(kernel: &Matrix) -> Matrix {
    kernel.map(f64::abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let cb = conv_bias_matrix(3, 5, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(cb.c, Matrix::identity(15));
    }

    #[test]
    fn ones_kernel_touches_nine_tokens() {
        let cb = conv_bias_matrix(4, 4, &Matrix::filled(3, 3, 1.0)).unwrap();
        for t in 0..16 {
            let row = cb.c.row(t);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 9);
            assert_eq!(row.iter().sum::<f64>(), 9.0);
        }
    }

    #[test]
    fn rows_are_shifted_copies() {
        let kernel = Matrix::from_fn(3, 3, |i, j| (3 * i + j) as f64 + 1.0);
        let (h, w) = (5, 4);
        let cb = conv_bias_matrix(h, w, &kernel).unwrap();
        for r in 0..h {
            for c in 0..w {
                let t = r * w + c;
                for r2 in 0..h {
                    for c2 in 0..w {
                        let shifted = ((r2 + h - r) % h) * w + (c2 + w - c) % w;
                        assert_eq!(cb.c[(t, r2 * w + c2)], cb.c[(0, shifted)]);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(conv_bias_matrix(4, 4, &Matrix::zeros(2, 3)).is_err());
        assert!(conv_bias_matrix(2, 2, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn difference_kernel_sums_to_zero() {
        assert!(difference_kernel().sum().abs() < 1e-15);
        assert!((abs_kernel(&difference_kernel()).sum() - 16.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn class_token_padding() {
        let cb = conv_bias_matrix(3, 3, &difference_kernel()).unwrap();
        let p = cb.for_tokens(10).unwrap();
        assert_eq!(p[(0, 0)], 8.0 / 9.0);
        assert!(p.row(0)[1..].iter().all(|&v| v == 0.0));
        assert!((1..10).all(|i| p[(i, 0)] == 0.0));
        assert_eq!(p[(5, 5)], cb.c[(4, 4)]);
        assert!(cb.for_tokens(11).is_err());
    }
}
