//! Training objective: aligned prior log-likelihood, change of variables,
//! duration labels and the log-domain duration loss.

use crate::error::{GlowError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::types::{Alignment, PriorStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    /// Negative log-likelihood per frame per latent dimension.
    pub nll: f64,
    pub duration_loss: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(nll: f64, duration_loss: f64) -> Result<Self> {
        let total = nll + duration_loss;
        for (name, v) in [("nll", nll), ("duration_loss", duration_loss)] {
            if !v.is_finite() {
                return Err(GlowError::NonFinite(name.into()));
            }
        }
        Ok(Self {
            nll,
            duration_loss,
            total,
        })
    }
}

/// `sum_j log N(z_j; mu_A(j), sigma_A(j))`.
pub fn prior_log_prob<S: Scalar>(z: &Matrix<S>, prior: &PriorStats<S>, a: &Alignment) -> Result<S> {
    if z.rows() != prior.dim() {
        return Err(GlowError::Dimension(format!(
            "latent has {} channels, prior has {}",
            z.rows(),
            prior.dim()
        )));
    }
    if a.total_frames() != z.cols() || a.text_len() != prior.text_len() {
        return Err(GlowError::Dimension(format!(
            "alignment covers {}x{}, inputs are {}x{}",
            a.text_len(),
            a.total_frames(),
            prior.text_len(),
            z.cols()
        )));
    }
    let half_log_2pi = S::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let half = S::of(0.5);
    let tokens = a.frame_tokens();
    let mut total = S::zero();
    for k in 0..z.rows() {
        let zk = z.row(k);
        let mu = prior.mean().row(k);
        let sigma = prior.scale().row(k);
        for (j, &i) in tokens.iter().enumerate() {
            let d = (zk[j] - mu[i]) / sigma[i];
            total += -half_log_2pi - sigma[i].ln() - half * d * d;
        }
    }
    Ok(total)
}

/// `log P_X(x) = log P_Z(z) + log|det dz/dx|`.
pub fn data_log_likelihood<S: Scalar>(prior_lp: S, logdet_sum: S) -> S {
    prior_lp + logdet_sum
}

/// Frames per token of the searched alignment.
pub fn extract_durations(a: &Alignment) -> Vec<usize> {
    a.durations().to_vec()
}

/// Mean of `(predicted_log_d_i - ln d_i)^2`.
pub fn duration_loss<S: Scalar>(predicted_log_d: &[S], durations: &[usize]) -> Result<S> {
    let targets = log_duration_targets::<S>(durations)?;
    if predicted_log_d.len() != targets.len() {
        return Err(GlowError::Dimension(format!(
            "{} predictions for {} durations",
            predicted_log_d.len(),
            targets.len()
        )));
    }
    let n = S::of(targets.len() as f64);
    Ok(predicted_log_d
        .iter()
        .zip(&targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<S>()
        / n)
}

/// Gradient of [`duration_loss`] with respect to the predictions.
pub fn duration_loss_grad<S: Scalar>(predicted_log_d: &[S], durations: &[usize]) -> Result<Vec<S>> {
    let targets = log_duration_targets::<S>(durations)?;
    let scale = S::of(2.0 / targets.len() as f64);
    Ok(predicted_log_d
        .iter()
        .zip(&targets)
        .map(|(&p, &t)| scale * (p - t))
        .collect())
}

fn log_duration_targets<S: Scalar>(durations: &[usize]) -> Result<Vec<S>> {
    if durations.is_empty() {
        return Err(GlowError::Dimension("no durations".into()));
    }
    durations
        .iter()
        .map(|&d| {
            if d < 1 {
                Err(GlowError::InvalidDuration(d as f64))
            } else {
                Ok(S::of((d as f64).ln()))
            }
        })
        .collect()
}

/// The per-frame, per-dimension training NLL.
pub fn normalized_nll(prior_lp: f64, logdet_sum: f64, frames: usize, dim: usize) -> f64 {
    -(prior_lp + logdet_sum) / (frames * dim) as f64
}
