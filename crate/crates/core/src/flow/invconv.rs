//! Grouped invertible 1x1 convolution with one shared kernel.
//!
//! Channels are split into the two coupling halves. Group `k` gathers the
//! `k`-th contiguous run of `C / (2g)` channels from the first half followed
//! by the `k`-th run from the second half, so every group mixes both halves.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GlowError, Result};
use crate::nn::{impl_module, Param};
use crate::scalar::Scalar;
use crate::tensor::{Lu, Matrix};

/// Smallest |det W| accepted before the kernel counts as singular.
const MIN_ABS_DET: f64 = 1e-10;

/// Channel indices of every group, in kernel order.
pub fn mixing_groups(channels: usize, groups: usize) -> Result<Vec<Vec<usize>>> {
    if groups == 0 || !channels.is_multiple_of(2 * groups) {
        return Err(GlowError::Dimension(format!(
            "{channels} channels do not split into {groups} groups over two halves"
        )));
    }
    let half = channels / 2;
    let run = channels / (2 * groups);
    Ok((0..groups)
        .map(|k| {
            (0..run)
                .map(|r| k * run + r)
                .chain((0..run).map(|r| half + k * run + r))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct GroupedInvConv<S> {
    /// side x side, side = channels / groups
    pub weight: Param<S>,
    channels: usize,
    groups: usize,
    perm: Vec<Vec<usize>>,
}

impl<S: Scalar> GroupedInvConv<S> {
    /// Random orthogonal kernel (log|det| = 0).
    pub fn orthogonal(channels: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut conv = Self::identity(channels, groups)?;
        let w = random_orthogonal(conv.side(), rng);
        conv.weight.value = w.into_iter().map(S::of).collect();
        Ok(conv)
    }

    pub fn identity(channels: usize, groups: usize) -> Result<Self> {
        let perm = mixing_groups(channels, groups)?;
        let side = channels / groups;
        let mut weight = Param::zeros(&[side, side]);
        for i in 0..side {
            weight.value[i * side + i] = S::one();
        }
        Ok(Self {
            weight,
            channels,
            groups,
            perm,
        })
    }

    pub fn with_kernel(channels: usize, groups: usize, kernel: &Matrix<S>) -> Result<Self> {
        let mut conv = Self::identity(channels, groups)?;
        if kernel.shape() != (conv.side(), conv.side()) {
            return Err(GlowError::Dimension(format!(
                "kernel {:?} for side {}",
                kernel.shape(),
                conv.side()
            )));
        }
        conv.weight.value = kernel.as_slice().to_vec();
        conv.check_invertible()?;
        Ok(conv)
    }

    pub fn side(&self) -> usize {
        self.channels / self.groups
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn groups_layout(&self) -> &[Vec<usize>] {
        &self.perm
    }

    pub fn kernel(&self) -> Matrix<S> {
        Matrix::from_vec(self.side(), self.side(), self.weight.value.clone()).expect("square kernel")
    }

    /// Errors when |det W| falls below the singularity guard.
    pub fn check_invertible(&self) -> Result<S> {
        let (logdet, _) = Lu::new(&self.kernel()).log_abs_det();
        if !logdet.is_finite() || logdet.as_f64() < MIN_ABS_DET.ln() {
            return Err(GlowError::SingularKernel(logdet.as_f64().exp()));
        }
        Ok(logdet)
    }

    fn apply(&self, kernel: &Matrix<S>, h: &Matrix<S>) -> Result<Matrix<S>> {
        if h.rows() != self.channels {
            return Err(GlowError::Dimension(format!(
                "1x1 conv expects {} channels, got {}",
                self.channels,
                h.rows()
            )));
        }
        let side = self.side();
        let mut out = Matrix::zeros(h.rows(), h.cols());
        for group in &self.perm {
            for r in 0..side {
                let dst = out.row_mut(group[r]);
                for c in 0..side {
                    let w = kernel.get(r, c);
                    for (o, &x) in dst.iter_mut().zip(h.row(group[c])) {
                        *o += w * x;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, h: &Matrix<S>) -> Result<(Matrix<S>, S)> {
        let logdet = self.check_invertible()?;
        let out = self.apply(&self.kernel(), h)?;
        Ok((out, S::of((h.cols() * self.groups) as f64) * logdet))
    }

    pub fn inverse(&self, h: &Matrix<S>) -> Result<(Matrix<S>, S)> {
        let logdet = self.check_invertible()?;
        let inv = Lu::new(&self.kernel()).inverse();
        let out = self.apply(&inv, h)?;
        Ok((out, -S::of((h.cols() * self.groups) as f64) * logdet))
    }

    /// `input` is what was fed to [`inverse`](Self::inverse).
    pub fn inverse_backward(&mut self, input: &Matrix<S>, g: &Matrix<S>, g_logdet: S) -> Matrix<S> {
        let side = self.side();
        let inv = Lu::new(&self.kernel()).inverse();
        let inv_t = inv.transpose();
        // y = V x per group: gx = V^T gy, gV = sum gy x^T
        let gx = self.apply(&inv_t, g).expect("shape checked in inverse");
        let mut g_inv = Matrix::zeros(side, side);
        for group in &self.perm {
            for r in 0..side {
                let gr = g.row(group[r]);
                for c in 0..side {
                    let xc = input.row(group[c]);
                    let acc: S = gr.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    let cur = g_inv.get(r, c);
                    g_inv.set(r, c, cur + acc);
                }
            }
        }
        // dW = -V^T gV V^T, and d(log|det W|)/dW = V^T
        let mut gw = inv_t.matmul(&g_inv).matmul(&inv_t);
        gw.scale_in_place(-S::one());
        let ld_weight = g_logdet * S::of((g.cols() * self.groups) as f64);
        for (gv, &vt) in gw.as_mut_slice().iter_mut().zip(inv_t.as_slice()) {
            *gv -= ld_weight * vt;
        }
        for (acc, &v) in self.weight.grad.iter_mut().zip(gw.as_slice()) {
            *acc += v;
        }
        gx
    }
}

impl_module!(GroupedInvConv { params: [weight], modules: [], lists: [], options: [] });

/// Q factor of a Gaussian matrix via modified Gram-Schmidt.
fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..n {
                    cols[i][k] -= d * cols[j][k];
                }
            }
            let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let mut w = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    w[r * n + c] = cols[c][r];
                }
            }
            return w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn labeled_groups() {
        let labels = ["a", "b", "g", "h", "m", "n", "s", "t"];
        let name = |g: &Vec<usize>| g.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        let g2: Vec<_> = mixing_groups(8, 2).unwrap().iter().map(name).collect();
        assert_eq!(g2, vec![vec!["a", "b", "m", "n"], vec!["g", "h", "s", "t"]]);
        let g4: Vec<_> = mixing_groups(8, 4).unwrap().iter().map(name).collect();
        assert_eq!(
            g4,
            vec![vec!["a", "m"], vec!["b", "n"], vec!["g", "s"], vec!["h", "t"]]
        );
        assert!(mixing_groups(8, 3).is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let conv = GroupedInvConv::<f64>::identity(8, 2).unwrap();
        let h = Matrix::from_fn(8, 3, |r, c| (r * 3 + c) as f64);
        let (y, ld) = conv.forward(&h).unwrap();
        assert_eq!(y, h);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn diagonal_logdet() {
        let k = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let conv = GroupedInvConv::<f64>::with_kernel(4, 2, &k).unwrap();
        let (_, ld) = conv.forward(&Matrix::zeros(4, 5)).unwrap();
        assert!((ld - 17.917595).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_init_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = GroupedInvConv::<f64>::orthogonal(16, 4, &mut rng).unwrap();
        assert!(conv.check_invertible().unwrap().abs() < 1e-12);
        let h = Matrix::from_fn(16, 4, |r, c| ((r * 4 + c) as f64).sin());
        let (y, ld) = conv.forward(&h).unwrap();
        let (back, ld_inv) = conv.inverse(&y).unwrap();
        assert!(back.max_abs_diff(&h) < 1e-12);
        assert!((ld + ld_inv).abs() < 1e-12);
    }

    #[test]
    fn singular_kernel_rejected() {
        let k = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            GroupedInvConv::<f64>::with_kernel(4, 2, &k),
            Err(GlowError::SingularKernel(_))
        ));
    }
}
