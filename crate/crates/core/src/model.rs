//! The full model: text encoder, duration predictor and flow decoder.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::{DurationCache, DurationPredictor, EncoderCache, TextEncoder};
use crate::error::{GlowError, Result};
use crate::flow::{DecoderCache, FlowDecoder};
use crate::likelihood::{duration_loss, duration_loss_grad, normalized_nll, prior_log_prob, LossBundle};
use crate::mas::{log_likelihood_grid, mas_search};
use crate::nn::{impl_module, Ctx};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::types::{Alignment, PriorStats};

/// One training pair. `mel` is D x T_mel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub tokens: Vec<usize>,
    pub mel: Matrix<S>,
    pub speaker: Option<usize>,
}

#[derive(Debug)]
pub struct GlowTts<S> {
    pub encoder: TextEncoder<S>,
    pub duration: DurationPredictor<S>,
    pub decoder: FlowDecoder<S>,
    config: ModelConfig,
}

impl<S: Scalar> Clone for GlowTts<S> {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            duration: self.duration.clone(),
            decoder: self.decoder.clone(),
            config: self.config.clone(),
        }
    }
}

impl_module!(GlowTts { params: [], modules: [encoder, duration, decoder], lists: [], options: [] });

/// Forward state of one sample, kept for [`GlowTts::backward_sample`].
#[derive(Debug, Clone)]
pub struct SampleForward<S> {
    pub losses: LossBundle,
    pub alignment: Alignment,
    pub prior_log_prob: f64,
    pub logdet: f64,
    /// Frames actually modelled (the mel length rounded down to even).
    pub frames: usize,
    pub mas_seconds: f64,
    pub z: Matrix<S>,
    pub mean: Matrix<S>,
    pub log_durations: Vec<S>,
    encoder: EncoderCache<S>,
    decoder: DecoderCache<S>,
    duration: DurationCache<S>,
}

impl<S: Scalar> GlowTts<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            encoder: TextEncoder::new(config.encoder_spec(), &mut rng)?,
            duration: DurationPredictor::new(config.duration_spec(), &mut rng)?,
            decoder: FlowDecoder::new(config.decoder_spec(), &mut rng)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hidden states and prior statistics with dropout off.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Matrix<S>, PriorStats<S>)> {
        let out = self.encoder.forward(tokens, tokens.len(), &mut Ctx::eval())?;
        Ok((out.hidden, PriorStats::unit_scale(out.mean)))
    }

    pub fn predict_log_durations(&self, hidden: &Matrix<S>) -> Result<Vec<S>> {
        Ok(self.duration.forward(hidden, hidden.cols(), &mut Ctx::eval())?.0)
    }

    /// Data-dependent actnorm initialisation from a batch of samples.
    pub fn initialize(&mut self, batch: &[&Sample<S>]) -> Result<()> {
        let mels: Vec<Matrix<S>> = batch
            .iter()
            .map(|s| s.mel.truncate_cols(s.mel.cols() - s.mel.cols() % 2))
            .collect();
        let refs: Vec<&Matrix<S>> = mels.iter().collect();
        let speakers: Vec<Option<usize>> = batch.iter().map(|s| s.speaker).collect();
        self.decoder.initialize(&refs, &speakers)
    }

    /// Losses of one sample. The alignment comes from MAS unless given.
    pub fn forward_sample(&self, sample: &Sample<S>, alignment: Option<&Alignment>, ctx: &mut Ctx) -> Result<SampleForward<S>> {
        self.forward_sample_with(sample, alignment, None, ctx)
    }

    /// As [`forward_sample`](Self::forward_sample), with the duration
    /// predictor optionally fed a fixed hidden state instead of the encoder's.
    pub fn forward_sample_with(
        &self,
        sample: &Sample<S>,
        alignment: Option<&Alignment>,
        detached_hidden: Option<&Matrix<S>>,
        ctx: &mut Ctx,
    ) -> Result<SampleForward<S>> {
        let n = sample.tokens.len();
        let enc = self.encoder.forward(&sample.tokens, n, ctx)?;
        let frames = sample.mel.cols() - sample.mel.cols() % 2;
        if frames < 2 {
            return Err(GlowError::TooShort(format!("{} mel frames", sample.mel.cols())));
        }
        let (z, logdet, dec) = self.decoder.inverse(&sample.mel, sample.speaker, ctx)?;
        let prior = PriorStats::unit_scale(enc.mean.clone());

        let started = Instant::now();
        let alignment = match alignment {
            Some(a) if a.total_frames() == frames => a.clone(),
            Some(a) => a.truncate_to(frames)?,
            None => mas_search(&log_likelihood_grid(&z, &prior)?)?.alignment,
        };
        let mas_seconds = started.elapsed().as_secs_f64();

        let lp = prior_log_prob(&z, &prior, &alignment)?;
        let nll = normalized_nll(lp.as_f64(), logdet.as_f64(), frames, z.rows());

        let hidden = detached_hidden.unwrap_or(&enc.hidden);
        let (log_durations, duration) = self.duration.forward(hidden, n, ctx)?;
        let dur = duration_loss(&log_durations, alignment.durations())?;
        let losses = LossBundle::new(nll, dur.as_f64())?;

        Ok(SampleForward {
            losses,
            alignment,
            prior_log_prob: lp.as_f64(),
            logdet: logdet.as_f64(),
            frames,
            mas_seconds,
            z,
            mean: enc.mean.clone(),
            log_durations,
            encoder: enc.cache,
            decoder: dec,
            duration,
        })
    }

    /// Accumulates `weight` times the gradient of the sample's total loss.
    /// The duration loss reaches only the duration predictor.
    pub fn backward_sample(&mut self, fwd: &SampleForward<S>, weight: S) -> Result<()> {
        self.backward_parts(fwd, weight, weight)
    }

    /// Separately weighted NLL and duration-loss gradients.
    pub fn backward_parts(&mut self, fwd: &SampleForward<S>, nll_weight: S, duration_weight: S) -> Result<()> {
        let weight = nll_weight;
        let (d, t) = fwd.z.shape();
        let td = S::of((d * t) as f64);
        let tokens = fwd.alignment.frame_tokens();
        let mut g_z = Matrix::zeros(d, t);
        let mut g_mean = Matrix::zeros(d, fwd.mean.cols());
        for k in 0..d {
            for (j, &i) in tokens.iter().enumerate() {
                let g = weight * (fwd.z.get(k, j) - fwd.mean.get(k, i)) / td;
                g_z.set(k, j, g);
                g_mean.set(k, i, g_mean.get(k, i) - g);
            }
        }
        self.decoder.inverse_backward(&fwd.decoder, &g_z, -weight / td)?;
        self.encoder.backward(&fwd.encoder, &g_mean, None);
        let mut g_logd = duration_loss_grad(&fwd.log_durations, fwd.alignment.durations())?;
        g_logd.iter_mut().for_each(|g| *g *= duration_weight);
        self.duration.backward(&fwd.duration, &g_logd);
        Ok(())
    }
}
