use rand::Rng;

use super::{impl_module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// 1-D convolution over time with "same" zero padding. Odd kernels only.
#[derive(Debug, Clone)]
pub struct Conv1d<S> {
    /// out x in x kernel
    pub weight: Param<S>,
    pub bias: Param<S>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    dilation: usize,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel], bound, rng),
            bias: Param::uniform(&[out_ch], bound, rng),
            in_ch,
            out_ch,
            kernel,
            dilation: dilation.max(1),
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: Param::zeros(&[out_ch, in_ch, kernel]),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            dilation: dilation.max(1),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.kernel - 1) / 2) as isize
    }

    /// Valid output range `[lo, hi)` for tap `k` and its input offset.
    #[inline]
    fn tap(&self, k: usize, len: usize) -> (usize, usize, isize) {
        let off = (k * self.dilation) as isize - self.pad();
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off.max(0)).max(0) as usize;
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, off)
    }

    pub fn forward(&self, x: &Matrix<S>) -> Matrix<S> {
        assert_eq!(x.rows(), self.in_ch, "conv input channels");
        let len = x.cols();
        let mut y = Matrix::zeros(self.out_ch, len);
        let w = &self.weight.value;
        for o in 0..self.out_ch {
            let yr = y.row_mut(o);
            yr.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..self.in_ch {
                let xr = x.row(i);
                for k in 0..self.kernel {
                    let wv = w[(o * self.in_ch + i) * self.kernel + k];
                    let (lo, hi, off) = self.tap(k, len);
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    for (yv, &xv) in yr[lo..hi].iter_mut().zip(src) {
                        *yv += wv * xv;
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Matrix<S>, gy: &Matrix<S>) -> Matrix<S> {
        let len = x.cols();
        let mut gx = Matrix::zeros(self.in_ch, len);
        for o in 0..self.out_ch {
            let gr = gy.row(o);
            self.bias.grad[o] += gr.iter().copied().sum();
            for i in 0..self.in_ch {
                let xr = x.row(i);
                for k in 0..self.kernel {
                    let widx = (o * self.in_ch + i) * self.kernel + k;
                    let wv = self.weight.value[widx];
                    let (lo, hi, off) = self.tap(k, len);
                    let a = (lo as isize + off) as usize;
                    let b = (hi as isize + off) as usize;
                    let mut acc = S::zero();
                    for (&g, &xv) in gr[lo..hi].iter().zip(&xr[a..b]) {
                        acc += g * xv;
                    }
                    self.weight.grad[widx] += acc;
                    let gxr = gx.row_mut(i);
                    for (gv, &g) in gxr[a..b].iter_mut().zip(&gr[lo..hi]) {
                        *gv += wv * g;
                    }
                }
            }
        }
        gx
    }
}

impl_module!(Conv1d { params: [weight, bias], modules: [], lists: [], options: [] });
