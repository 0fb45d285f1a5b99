//! Invertible mel decoder.
//!
//! Direction convention: `forward` maps latent to mel (sampling), `inverse`
//! maps mel to latent (training). Every layer implements both directions
//! explicitly and the backward pass of its inverse.

mod actnorm;
mod coupling;
mod decoder;
mod invconv;

pub use actnorm::ActNorm;
pub use coupling::{AffineCoupling, CouplingCache, CouplingSpec};
pub use decoder::{DecoderCache, DecoderSpec, FlowBlock, FlowDecoder};
pub use invconv::{mixing_groups, GroupedInvConv};

use crate::error::{GlowError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `C x T -> 2C x floor(T/2)`: frame `2t + s` of channel `c` lands in
/// channel `s * C + c` at step `t`. An odd trailing frame is dropped.
pub fn squeeze<S: Scalar>(x: &Matrix<S>) -> Result<Matrix<S>> {
    let (c, t) = x.shape();
    if t < 2 {
        return Err(GlowError::TooShort(format!("squeeze needs >= 2 frames, got {t}")));
    }
    let half = t / 2;
    Ok(Matrix::from_fn(2 * c, half, |r, j| {
        let (s, ch) = (r / c, r % c);
        x.get(ch, 2 * j + s)
    }))
}

/// Exact inverse of [`squeeze`] on even-length inputs.
pub fn unsqueeze<S: Scalar>(h: &Matrix<S>) -> Result<Matrix<S>> {
    let (c2, half) = h.shape();
    if c2 % 2 != 0 {
        return Err(GlowError::Dimension(format!("unsqueeze needs an even channel count, got {c2}")));
    }
    let c = c2 / 2;
    Ok(Matrix::from_fn(c, 2 * half, |ch, t| h.get((t % 2) * c + ch, t / 2)))
}
