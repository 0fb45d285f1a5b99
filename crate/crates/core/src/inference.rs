//! Parallel synthesis and voice conversion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GlowError, Result};
use crate::mas::{log_likelihood_grid, mas_search, MasResult};
use crate::model::GlowTts;
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::types::{Alignment, MelSpectrogram, PriorStats, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub tokens: TokenSequence,
    pub temperature: f64,
    pub length_scale: f64,
    pub speaker: Option<usize>,
    /// Noise seed; `None` uses seed 0.
    pub seed: Option<u64>,
}

impl SynthesisRequest {
    pub fn new(tokens: TokenSequence) -> Self {
        Self { tokens, temperature: 1.0, length_scale: 1.0, speaker: None, seed: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GlowError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(GlowError::Config(format!("length scale {} must be > 0", self.length_scale)));
        }
        Ok(())
    }
}

/// `max(1, ceil(exp(log_d) * length_scale))` per token.
pub fn durations_from_log<S: Scalar>(log_durations: &[S], length_scale: f64) -> Vec<usize> {
    log_durations
        .iter()
        .map(|l| {
            let d = (l.as_f64().exp() * length_scale).ceil();
            if d.is_finite() { d.max(1.0) as usize } else { 1 }
        })
        .collect()
}

pub fn predict_alignment<S: Scalar>(model: &GlowTts<S>, tokens: &TokenSequence, length_scale: f64) -> Result<Alignment> {
    let (hidden, _) = model.encode(tokens.ids())?;
    let log_d = model.predict_log_durations(&hidden)?;
    Alignment::from_durations(durations_from_log(&log_d, length_scale))
}

/// Frame-level statistics: column `j` holds the statistics of token `A(j)`.
pub fn expand_by_durations<S: Scalar>(prior: &PriorStats<S>, a: &Alignment) -> Result<(Matrix<S>, Matrix<S>)> {
    if a.text_len() != prior.text_len() {
        return Err(GlowError::Dimension(format!(
            "alignment over {} tokens for a prior over {}",
            a.text_len(),
            prior.text_len()
        )));
    }
    let tokens = a.frame_tokens();
    let d = prior.dim();
    let mean = Matrix::from_fn(d, tokens.len(), |r, j| prior.mean().get(r, tokens[j]));
    let scale = Matrix::from_fn(d, tokens.len(), |r, j| prior.scale().get(r, tokens[j]));
    Ok((mean, scale))
}

/// `z = mu + eps * T * sigma` with standard normal `eps`.
pub fn sample_latent<S: Scalar>(mean: &Matrix<S>, scale: &Matrix<S>, temperature: f64, seed: Option<u64>) -> Matrix<S> {
    if temperature == 0.0 {
        return mean.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let t = S::of(temperature);
    let mut z = mean.clone();
    for (v, &s) in z.as_mut_slice().iter_mut().zip(scale.as_slice()) {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += S::of(e) * t * s;
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis<S> {
    pub mel: MelSpectrogram<S>,
    /// Durations as predicted, before an odd final frame is dropped.
    pub alignment: Alignment,
    /// D x frames expanded prior means that were fed to the decoder.
    pub frame_means: Matrix<S>,
}

pub fn synthesize<S: Scalar>(model: &GlowTts<S>, req: &SynthesisRequest) -> Result<Synthesis<S>> {
    req.validate()?;
    let (hidden, prior) = model.encode(req.tokens.ids())?;
    let log_d = model.predict_log_durations(&hidden)?;
    let alignment = Alignment::from_durations(durations_from_log(&log_d, req.length_scale))?;
    let total = alignment.total_frames();
    if total < 2 {
        return Err(GlowError::TooShort(format!("{total} predicted frame(s)")));
    }
    let (mean, scale) = expand_by_durations(&prior, &alignment)?;
    let frames = total - total % 2;
    let mean = mean.truncate_cols(frames);
    let scale = scale.truncate_cols(frames);
    let z = sample_latent(&mean, &scale, req.temperature, req.seed);
    let mel = model.decoder.forward(&z, req.speaker)?;
    Ok(Synthesis { mel: MelSpectrogram::new(mel), alignment, frame_means: mean })
}

/// Most probable alignment of `tokens` to `mel` under the model, covering
/// every mel frame. A dropped odd last frame can only belong to the last
/// token, so it is added back there.
pub fn align_mel<S: Scalar>(
    model: &GlowTts<S>,
    tokens: &TokenSequence,
    mel: &MelSpectrogram<S>,
    speaker: Option<usize>,
) -> Result<MasResult> {
    let (_, prior) = model.encode(tokens.ids())?;
    let (z, _, _) = model.decoder.inverse(mel.values(), speaker, &mut Ctx::eval())?;
    let mut result = mas_search(&log_likelihood_grid(&z, &prior)?)?;
    if mel.frames() > z.cols() {
        let mut d = result.alignment.durations().to_vec();
        *d.last_mut().unwrap() += mel.frames() - z.cols();
        result.alignment = Alignment::from_durations(d)?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceConversion<S> {
    /// Speaker-independent latent of the source mel.
    pub latent: Matrix<S>,
    pub mel: MelSpectrogram<S>,
}

/// `f_dec(f_dec^-1(x | source) | target)`.
pub fn voice_convert<S: Scalar>(
    model: &GlowTts<S>,
    mel: &MelSpectrogram<S>,
    source: usize,
    target: usize,
) -> Result<VoiceConversion<S>> {
    let count = model.decoder.num_speakers();
    for id in [source, target] {
        if id >= count {
            return Err(GlowError::UnknownSpeaker { id, count });
        }
    }
    let (latent, _, _) = model.decoder.inverse(mel.values(), Some(source), &mut Ctx::eval())?;
    let out = model.decoder.forward(&latent, Some(target))?;
    Ok(VoiceConversion { latent, mel: MelSpectrogram::new(out) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretisation() {
        assert_eq!(durations_from_log(&[0.0f64, 0.0], 1.0), vec![1, 1]);
        assert_eq!(durations_from_log(&[0.0f64], 2.0), vec![2]);
        assert_eq!(durations_from_log(&[-9.0f64, 1.0], 0.5), vec![1, 2]);
    }

    #[test]
    fn expansion() {
        let prior = PriorStats::unit_scale(Matrix::from_vec(1, 2, vec![1.0f64, 2.0]).unwrap());
        let a = Alignment::from_durations(vec![2, 1]).unwrap();
        let (m, s) = expand_by_durations(&prior, &a).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 1.0, 2.0]);
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_temperature_is_the_mean() {
        let m = Matrix::from_fn(3, 4, |r, c| (r + c) as f32);
        let s = Matrix::filled(3, 4, 1.0f32);
        assert_eq!(sample_latent(&m, &s, 0.0, Some(5)), m);
        assert_eq!(sample_latent(&m, &s, 0.7, Some(5)), sample_latent(&m, &s, 0.7, Some(5)));
        assert_ne!(sample_latent(&m, &s, 0.7, Some(5)), m);
    }

    #[test]
    fn latent_statistics() {
        let n = 100_000;
        let m = Matrix::filled(1, n, 2.0f64);
        let s = Matrix::filled(1, n, 1.0f64);
        let z = sample_latent(&m, &s, 0.667, Some(11));
        let mean = z.sum() / n as f64;
        let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02);
        assert!((var.sqrt() - 0.667).abs() < 0.01 * 0.667);
    }
}
