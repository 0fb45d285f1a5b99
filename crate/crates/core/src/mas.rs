//! Monotonic alignment search.
//!
//! Given per-pair log-likelihoods `L[i, j]` of latent frame `j` under token
//! `i`, finds the monotonic surjective alignment with the largest total
//! log-likelihood. The cumulative table obeys
//!
//! ```text
//! Q[i, j] = max(Q[i-1, j-1], Q[i, j-1]) + L[i, j]
//! ```
//!
//! with the first row holding prefix sums of `L[0, ..]`. The alignment is
//! recovered by backtracking from the last token at the last frame.

use rayon::prelude::*;

use crate::error::{GlowError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::types::{Alignment, PriorStats};

/// Stand-in for -inf that keeps max/add arithmetic NaN-free.
const NEG_INF: f64 = f64::MIN;

/// `L[i, j] = log N(z_j; mu_i, sigma_i)` summed over latent dimensions,
/// T_text x T_mel.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoodGrid<S> {
    values: Matrix<S>,
}

impl<S: Scalar> LogLikelihoodGrid<S> {
    pub fn new(values: Matrix<S>) -> Result<Self> {
        if !values.is_finite() {
            return Err(GlowError::NonFinite("log-likelihood grid".into()));
        }
        Ok(Self { values })
    }

    pub fn text_len(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    /// Total log-likelihood of `a` under this grid.
    pub fn score(&self, a: &Alignment) -> f64 {
        a.frame_tokens()
            .iter()
            .enumerate()
            .map(|(j, &i)| self.values.get(i, j).as_f64())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasResult {
    pub alignment: Alignment,
    pub max_log_likelihood: f64,
}

pub fn log_likelihood_grid<S: Scalar>(
    z: &Matrix<S>,
    prior: &PriorStats<S>,
) -> Result<LogLikelihoodGrid<S>> {
    let dim = z.rows();
    if prior.dim() != dim {
        return Err(GlowError::Dimension(format!(
            "latent has {} channels, prior has {}",
            dim,
            prior.dim()
        )));
    }
    let (t_text, t_mel) = (prior.text_len(), z.cols());
    let half_log_2pi = S::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let half = S::of(0.5);
    let mut grid = Matrix::zeros(t_text, t_mel);
    for k in 0..dim {
        let zk = z.row(k);
        let mu = prior.mean().row(k);
        let sigma = prior.scale().row(k);
        for i in 0..t_text {
            let inv_var = S::one() / (sigma[i] * sigma[i]);
            let c = -half_log_2pi - sigma[i].ln();
            let m = mu[i];
            for (g, &zv) in grid.row_mut(i).iter_mut().zip(zk) {
                let d = zv - m;
                *g += c - half * d * d * inv_var;
            }
        }
    }
    LogLikelihoodGrid::new(grid)
}

/// Exact most-probable alignment in O(T_text x T_mel).
///
/// Ties in backtracking keep the current token.
pub fn mas_search<S: Scalar>(grid: &LogLikelihoodGrid<S>) -> Result<MasResult> {
    let (t_text, t_mel) = (grid.text_len(), grid.frames());
    if t_text == 0 || t_mel < t_text {
        return Err(GlowError::NoAlignment {
            text: t_text,
            frames: t_mel,
        });
    }
    // Row by row with two rolling rows; `from_diag` keeps each cell's choice
    // for backtracking so the full Q table is never stored.
    let l = grid.values().as_slice();
    let mut prev = vec![NEG_INF; t_mel];
    let mut cur = vec![NEG_INF; t_mel];
    let mut from_diag = vec![false; t_text * t_mel];

    let mut acc = 0.0;
    for (q, &v) in prev.iter_mut().zip(&l[..t_mel]) {
        acc += v.as_f64();
        *q = acc;
    }
    for i in 1..t_text {
        let row = &l[i * t_mel..(i + 1) * t_mel];
        let choice = &mut from_diag[i * t_mel..(i + 1) * t_mel];
        cur[i - 1] = NEG_INF;
        for j in i..t_mel {
            let diag = prev[j - 1];
            let stay = cur[j - 1];
            choice[j] = diag > stay;
            cur[j] = if choice[j] { diag } else { stay } + row[j].as_f64();
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let max_log_likelihood = prev[t_mel - 1];

    let mut tokens = vec![0usize; t_mel];
    let mut at = t_text - 1;
    for j in (1..t_mel).rev() {
        tokens[j] = at;
        if at > 0 && from_diag[at * t_mel + j] {
            at -= 1;
        }
    }
    debug_assert_eq!(at, 0);

    let mut durations = vec![0usize; t_text];
    for &i in &tokens {
        durations[i] += 1;
    }
    Ok(MasResult {
        alignment: Alignment::from_durations(durations)?,
        max_log_likelihood,
    })
}

/// Searches independent instances concurrently.
pub fn mas_search_batch<S: Scalar>(grids: &[LogLikelihoodGrid<S>]) -> Result<Vec<MasResult>> {
    grids.par_iter().map(mas_search).collect()
}

pub const BRUTE_FORCE_MAX_TEXT: usize = 8;
pub const BRUTE_FORCE_MAX_FRAMES: usize = 14;

/// Enumerates every composition of T_mel into T_text positive parts.
pub fn brute_force_alignment<S: Scalar>(grid: &LogLikelihoodGrid<S>) -> Result<MasResult> {
    let (t_text, t_mel) = (grid.text_len(), grid.frames());
    if t_text > BRUTE_FORCE_MAX_TEXT || t_mel > BRUTE_FORCE_MAX_FRAMES {
        return Err(GlowError::EnumerationBound {
            text: t_text,
            frames: t_mel,
            max_text: BRUTE_FORCE_MAX_TEXT,
            max_frames: BRUTE_FORCE_MAX_FRAMES,
        });
    }
    if t_text == 0 || t_mel < t_text {
        return Err(GlowError::NoAlignment {
            text: t_text,
            frames: t_mel,
        });
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut parts = vec![0usize; t_text];
    enumerate_compositions(t_mel, 0, &mut parts, &mut |d| {
        let a = Alignment::from_durations(d.to_vec()).expect("positive parts");
        let s = grid.score(&a);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, d.to_vec()));
        }
    });
    let (score, durations) = best.expect("at least one composition");
    Ok(MasResult {
        alignment: Alignment::from_durations(durations)?,
        max_log_likelihood: score,
    })
}

fn enumerate_compositions(
    remaining: usize,
    pos: usize,
    parts: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    let n = parts.len();
    if pos == n - 1 {
        parts[pos] = remaining;
        visit(parts);
        return;
    }
    let slots_after = n - pos - 1;
    for d in 1..=remaining - slots_after {
        parts[pos] = d;
        enumerate_compositions(remaining - d, pos + 1, parts, visit);
    }
}
