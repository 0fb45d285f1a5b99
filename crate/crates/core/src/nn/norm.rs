use super::{impl_module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EPS: f64 = LAYER_NORM_EPS;

/// Normalises over channels independently at every time step.
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Matrix<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], S::one()),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Matrix<S>) -> (Matrix<S>, LayerNormCache<S>) {
        let (c, t) = x.shape();
        let n = S::of(c as f64);
        let mut mean = vec![S::zero(); t];
        for r in 0..c {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![S::zero(); t];
        for r in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&s| (s / n + S::of(EPS)).sqrt().recip()).collect();
        let mut xhat = Matrix::zeros(c, t);
        let mut y = Matrix::zeros(c, t);
        for r in 0..c {
            let (g, b) = (self.gamma.value[r], self.beta.value[r]);
            for j in 0..t {
                let h = (x.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                y.set(r, j, g * h + b);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, gy: &Matrix<S>) -> Matrix<S> {
        let (c, t) = gy.shape();
        let n = S::of(c as f64);
        let mut ghat = Matrix::zeros(c, t);
        for r in 0..c {
            let g = self.gamma.value[r];
            for j in 0..t {
                let gv = gy.get(r, j);
                self.gamma.grad[r] += gv * cache.xhat.get(r, j);
                self.beta.grad[r] += gv;
                ghat.set(r, j, gv * g);
            }
        }
        let mut mean_g = vec![S::zero(); t];
        let mut mean_gx = vec![S::zero(); t];
        for r in 0..c {
            for j in 0..t {
                mean_g[j] += ghat.get(r, j);
                mean_gx[j] += ghat.get(r, j) * cache.xhat.get(r, j);
            }
        }
        let mut gx = Matrix::zeros(c, t);
        for r in 0..c {
            for j in 0..t {
                let v = cache.inv_std[j]
                    * (ghat.get(r, j) - mean_g[j] / n - cache.xhat.get(r, j) * mean_gx[j] / n);
                gx.set(r, j, v);
            }
        }
        gx
    }
}

impl_module!(LayerNorm { params: [gamma, beta], modules: [], lists: [], options: [] });

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    #[test]
    fn normalises_each_column() {
        let ln = LayerNorm::<f64>::new(4);
        let x = Matrix::from_fn(4, 3, |r, c| (r * r) as f64 + c as f64 * 3.0);
        let (y, _) = ln.forward(&x);
        for j in 0..3 {
            let col = y.column(j);
            let m: f64 = col.iter().sum::<f64>() / 4.0;
            let v: f64 = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut ln = LayerNorm::<f64>::new(3);
        ln.gamma.value = vec![0.5, 1.5, -1.0];
        ln.beta.value = vec![0.1, 0.0, -0.2];
        let x = Matrix::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 1.3).sin());
        let gy = Matrix::from_fn(3, 4, |r, c| ((r + c) as f64 * 0.7).cos());
        let f = |ln: &LayerNorm<f64>, x: &Matrix<f64>| -> f64 {
            let (y, _) = ln.forward(x);
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ln.forward(&x);
        ln.zero_grad();
        let gx = ln.backward(&cache, &gy);
        let eps = 1e-6;
        for idx in 0..12 {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += eps;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= eps;
            let fd = (f(&ln, &xp) - f(&ln, &xm)) / (2.0 * eps);
            assert!((fd - gx.as_slice()[idx]).abs() < 1e-7, "{fd} vs {}", gx.as_slice()[idx]);
        }
        for idx in 0..3 {
            let mut l2 = ln.clone();
            l2.gamma.value[idx] += eps;
            let up = f(&l2, &x);
            l2.gamma.value[idx] -= 2.0 * eps;
            let fd = (up - f(&l2, &x)) / (2.0 * eps);
            assert!((fd - ln.gamma.grad[idx]).abs() < 1e-7);
        }
    }
}
