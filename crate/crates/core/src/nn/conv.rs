//! im2col / col2im for batched 2-D convolution (NCHW, square kernels).

use super::tensor::Real;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if input + 2 * pad < kernel {
        0
    } else {
        (input + 2 * pad - kernel) / stride + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.height, self.kernel, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out_len(self.width, self.kernel, self.stride, self.pad)
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: one per (batch, oy, ox).
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Input `[B, C, H, W]` to the `[C*K*K, B*Ho*Wo]` patch matrix.
    pub fn im2col<T: Real>(&self, input: &[T], col: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for b in 0..self.batch {
                        let plane = &input[(b * self.channels + c) * self.height * self.width..][..self.height * self.width];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let out = &mut dst[(b * oh + oy) * ow..][..ow];
                            if iy < 0 || iy >= self.height as isize {
                                out.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.width..][..self.width];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                *o = if ix < 0 || ix >= self.width as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto the input layout.
    pub fn col2im<T: Real>(&self, col: &[T], grad_input: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let cols = self.col_cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for b in 0..self.batch {
                        let plane = &mut grad_input[(b * self.channels + c) * self.height * self.width..]
                            [..self.height * self.width];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let g = &src[(b * oh + oy) * ow..][..ow];
                            let dst = &mut plane[iy as usize * self.width..][..self.width];
                            for (ox, &v) in g.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && (ix as usize) < self.width {
                                    dst[ix as usize] = dst[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_len(32, 3, 1, 1), 32);
        assert_eq!(conv_out_len(32, 3, 2, 1), 16);
        assert_eq!(conv_out_len(21, 3, 2, 1), 11);
        assert_eq!(conv_out_len(21, 1, 2, 0), 11);
        assert_eq!(conv_out_len(1, 3, 1, 0), 0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeometry { batch: 2, channels: 3, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        let mut col = vec![0.0; y.len()];
        g.im2col(&x, &mut col);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
