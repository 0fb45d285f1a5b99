//! Iterative training: MAS alignment, then a gradient step on the fixed
//! alignment. Also hosts the optimizer, the learning-rate schedule, a
//! finite-difference gradient checker and the synthetic data generator.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{GlowError, Result};
use crate::inference::durations_from_log;
use crate::likelihood::LossBundle;
use crate::model::{GlowTts, Sample, SampleForward};
use crate::nn::{Ctx, Module};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::types::Alignment;

/// `scale * dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`; `step` counts
/// from 1.
pub fn noam_lr(step: usize, warmup: usize, scale: f64, model_dim: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moments in parameter traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![S::zero(); n], v: vec![S::zero(); n] }
    }
}

/// One bias-corrected Adam step over flat slices.
pub fn adam_update<S: Scalar>(params: &mut [S], grads: &[S], state: &mut AdamState<S>, lr: f64, cfg: AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::of(1.0 - cfg.beta1.powi(state.step as i32));
    let c2 = S::of(1.0 - cfg.beta2.powi(state.step as i32));
    let (lr, eps, one) = (S::of(lr), S::of(cfg.eps), S::one());
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam applied in place to every parameter of a module.
pub fn adam_step<S: Scalar, M: Module<S>>(module: &mut M, state: &mut AdamState<S>, lr: f64, cfg: AdamConfig) {
    let mut params = Vec::new();
    let mut grads = Vec::new();
    for (_, p) in module.named_params() {
        params.extend_from_slice(&p.value);
        grads.extend_from_slice(&p.grad);
    }
    adam_update(&mut params, &grads, state, lr, cfg);
    module.set_flat_values(&params);
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar, M: Module<S>>(module: &mut M, max_norm: f64) -> f64 {
    let norm = module
        .named_params()
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = S::of(max_norm / norm);
        for (_, p) in module.named_params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor so that gradients that are zero up to rounding do not
/// produce huge relative errors.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` at `params`.
/// Error per entry is `|a - n| / max(|a| + |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(params: &[f64], loss: impl Fn(&[f64]) -> f64, analytic: &[f64], epsilon: f64) -> GradCheck {
    assert_eq!(params.len(), analytic.len());
    let mut x = params.to_vec();
    let mut worst = GradCheck { max_relative_error: 0.0, worst_index: 0, checked: params.len() };
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let up = loss(&x);
        x[i] = orig - epsilon;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > worst.max_relative_error || err.is_nan() {
            worst.max_relative_error = err;
            worst.worst_index = i;
        }
    }
    worst
}

/// Gradient verification of a whole model on one sample, with the alignment
/// held at the one MAS picks for the starting parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradCheck {
    pub nll: GradCheck,
    pub duration: GradCheck,
    /// Largest |analytic gradient| of the duration loss on encoder parameters.
    pub duration_grad_on_encoder: f64,
}

pub fn model_grad_check(model: &GlowTts<f64>, sample: &Sample<f64>, epsilon: f64) -> Result<ModelGradCheck> {
    let base = model.forward_sample(sample, None, &mut Ctx::eval())?;
    let alignment = base.alignment.clone();
    let hidden = model.encoder.forward(&sample.tokens, sample.tokens.len(), &mut Ctx::eval())?.hidden;
    let params = model.flat_values();

    let mut probe = model.clone();
    probe.zero_grad();
    probe.backward_parts(&base, 1.0, 0.0)?;
    let g_nll = probe.flat_grads();
    probe.zero_grad();
    probe.backward_parts(&base, 0.0, 1.0)?;
    let g_dur = probe.flat_grads();
    let n_enc = model.encoder.num_params();
    let duration_grad_on_encoder = g_dur[..n_enc].iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let eval = |theta: &[f64], pick: fn(&SampleForward<f64>) -> f64, detach: bool| -> f64 {
        let mut m = model.clone();
        m.set_flat_values(theta);
        let h = detach.then_some(&hidden);
        m.forward_sample_with(sample, Some(&alignment), h, &mut Ctx::eval())
            .map(|f| pick(&f))
            .unwrap_or(f64::NAN)
    };
    let nll = grad_check(&params, |t| eval(t, |f| f.losses.nll, false), &g_nll, epsilon);
    let duration = grad_check(&params, |t| eval(t, |f| f.losses.duration_loss, true), &g_dur, epsilon);
    Ok(ModelGradCheck { nll, duration, duration_grad_on_encoder })
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab: usize,
    pub dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Per-token jitter around each token's own base duration; 0 makes the
    /// duration a function of the token.
    pub duration_jitter: usize,
    pub noise: f64,
    /// Standard deviation of the ground-truth mean entries.
    pub mean_scale: f64,
    pub samples: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub num_speakers: usize,
    /// Standard deviation of the per-speaker additive offset.
    pub speaker_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab: 8,
            dim: 8,
            min_duration: 1,
            max_duration: 6,
            duration_jitter: 0,
            noise: 0.1,
            mean_scale: 1.0,
            samples: 200,
            min_tokens: 3,
            max_tokens: 8,
            num_speakers: 1,
            speaker_shift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GlowError::Config(m.to_string()));
        if self.vocab < 2 || self.dim == 0 || self.samples == 0 {
            return bad("synthetic data needs vocab >= 2, dim >= 1 and samples >= 1");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("synthetic durations need 1 <= min_duration <= max_duration");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("synthetic lengths need 1 <= min_tokens <= max_tokens");
        }
        if self.noise < 0.0 || self.mean_scale <= 0.0 || self.speaker_shift < 0.0 {
            return bad("synthetic scales must be non-negative");
        }
        Ok(())
    }

    /// Parses comma- or newline-separated `key=value` pairs over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for item in text.split([',', '\n']).map(|s| s.split('#').next().unwrap_or("").trim()) {
            if item.is_empty() {
                continue;
            }
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| GlowError::Config(format!("expected key=value, got `{item}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| GlowError::Config(format!("invalid value `{v}` for `{k}`")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| GlowError::Config(format!("invalid value `{v}` for `{k}`")))
            };
            match k {
                "vocab" => spec.vocab = int(v)?,
                "dim" => spec.dim = int(v)?,
                "min_duration" => spec.min_duration = int(v)?,
                "max_duration" => spec.max_duration = int(v)?,
                "duration_jitter" => spec.duration_jitter = int(v)?,
                "noise" => spec.noise = num(v)?,
                "mean_scale" => spec.mean_scale = num(v)?,
                "samples" => spec.samples = int(v)?,
                "min_tokens" => spec.min_tokens = int(v)?,
                "max_tokens" => spec.max_tokens = int(v)?,
                "num_speakers" => spec.num_speakers = int(v)?,
                "speaker_shift" => spec.speaker_shift = num(v)?,
                "seed" => {
                    spec.seed = v
                        .parse()
                        .map_err(|_| GlowError::Config(format!("invalid seed `{v}`")))?
                }
                other => return Err(GlowError::Config(format!("unknown synthetic key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub tokens: Vec<usize>,
    /// D x sum(durations)
    pub mel: Matrix<f64>,
    pub alignment: Alignment,
    pub speaker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// D x K ground-truth token means.
    pub means: Matrix<f64>,
    /// Base duration of every token type.
    pub token_durations: Vec<usize>,
    /// D x speakers additive offsets (empty for one speaker).
    pub speaker_offsets: Matrix<f64>,
    pub samples: Vec<SyntheticSample>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic synthetic corpus with known alignments.
///
/// Adjacent tokens always differ, otherwise the boundary between two copies
/// of the same token would not be identifiable from the frames. Samples
/// whose odd final frame is a whole token are redrawn.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_gap = (4.0 * spec.noise).max(1e-6);
    let means = loop {
        let m = Matrix::from_fn(spec.dim, spec.vocab, |_, _| gaussian(&mut rng) * spec.mean_scale);
        let separated = (0..spec.vocab).all(|a| {
            (a + 1..spec.vocab).all(|b| {
                let d2: f64 = (0..spec.dim).map(|r| (m.get(r, a) - m.get(r, b)).powi(2)).sum();
                d2.sqrt() >= min_gap
            })
        });
        if separated {
            break m;
        }
    };
    let token_durations: Vec<usize> = (0..spec.vocab)
        .map(|_| rng.random_range(spec.min_duration..=spec.max_duration))
        .collect();
    let speakers = spec.num_speakers.max(1);
    let speaker_offsets = if speakers > 1 {
        Matrix::from_fn(spec.dim, speakers, |_, _| gaussian(&mut rng) * spec.speaker_shift)
    } else {
        Matrix::zeros(spec.dim, 0)
    };

    let mut samples = Vec::with_capacity(spec.samples);
    while samples.len() < spec.samples {
        let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let t = match tokens.last() {
                None => rng.random_range(0..spec.vocab),
                Some(&prev) => {
                    let t = rng.random_range(0..spec.vocab - 1);
                    if t >= prev { t + 1 } else { t }
                }
            };
            tokens.push(t);
        }
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                let base = token_durations[t] as i64;
                let j = spec.duration_jitter as i64;
                let d = if j > 0 { base + rng.random_range(-j..=j) } else { base };
                d.clamp(spec.min_duration as i64, spec.max_duration as i64) as usize
            })
            .collect();
        let total: usize = durations.iter().sum();
        if total % 2 == 1 && durations[len - 1] == 1 {
            // the decoder drops an odd last frame; keep every token visible
            continue;
        }
        let alignment = Alignment::from_durations(durations)?;
        let speaker = (speakers > 1).then(|| rng.random_range(0..speakers));
        let frame_tokens = alignment.frame_tokens();
        let mut mel = Matrix::zeros(spec.dim, frame_tokens.len());
        for (j, &i) in frame_tokens.iter().enumerate() {
            for r in 0..spec.dim {
                let shift = speaker.map_or(0.0, |s| speaker_offsets.get(r, s));
                mel.set(r, j, means.get(r, tokens[i]) + shift + spec.noise * gaussian(&mut rng));
            }
        }
        samples.push(SyntheticSample { tokens, mel, alignment, speaker });
    }
    Ok(SyntheticDataset { spec: spec.clone(), means, token_durations, speaker_offsets, samples })
}

impl SyntheticSample {
    pub fn to_sample<S: Scalar>(&self) -> Sample<S> {
        Sample { tokens: self.tokens.clone(), mel: self.mel.convert(), speaker: self.speaker }
    }
}

/// One optimisation step's diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub learning_rate: f64,
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub mas_seconds: f64,
    pub step_seconds: f64,
}

impl StepReport {
    /// Share of the step spent in alignment search.
    pub fn mas_fraction(&self) -> f64 {
        if self.step_seconds > 0.0 {
            self.mas_seconds / self.step_seconds
        } else {
            0.0
        }
    }
}

/// Model plus optimizer state.
#[derive(Debug)]
pub struct Trainer<S> {
    pub model: GlowTts<S>,
    pub adam: AdamState<S>,
    pub config: TrainConfig,
    pub step: usize,
    seed: u64,
    pool: Option<std::sync::Arc<rayon::ThreadPool>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: GlowTts<S>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = model.num_params();
        Self::resume(model, AdamState::new(n), config, seed, 0)
    }

    pub fn resume(model: GlowTts<S>, adam: AdamState<S>, config: TrainConfig, seed: u64, step: usize) -> Result<Self> {
        if adam.m.len() != model.num_params() || adam.v.len() != model.num_params() {
            return Err(GlowError::Dimension("optimizer state does not match the model".into()));
        }
        let pool = if config.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| GlowError::Config(format!("thread pool: {e}")))?;
            Some(std::sync::Arc::new(pool))
        } else {
            None
        };
        Ok(Self { model, adam, config, step, seed, pool })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { beta1: self.config.adam_beta1, beta2: self.config.adam_beta2, eps: self.config.adam_eps }
    }

    fn sample_ctx(&self, index: usize) -> Ctx {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((self.step as u64) << 20)
            .wrapping_add(index as u64);
        Ctx::train(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Forward passes for a batch; per-sample dropout streams depend only on
    /// the seed, the step and the sample position.
    fn forward_batch(&self, batch: &[&Sample<S>]) -> Result<Vec<SampleForward<S>>> {
        let run = |(i, s): (usize, &&Sample<S>)| self.model.forward_sample(s, None, &mut self.sample_ctx(i));
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().enumerate().map(run).collect()),
            None => batch.iter().enumerate().map(run).collect(),
        }
    }

    pub fn train_step(&mut self, batch: &[&Sample<S>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(GlowError::Dimension("empty batch".into()));
        }
        let started = Instant::now();
        if !self.model.decoder.is_initialized() {
            self.model.initialize(batch)?;
        }
        let forwards = self.forward_batch(batch)?;
        let b = batch.len() as f64;
        let nll = forwards.iter().map(|f| f.losses.nll).sum::<f64>() / b;
        let dur = forwards.iter().map(|f| f.losses.duration_loss).sum::<f64>() / b;
        let losses = LossBundle::new(nll, dur)?;
        let mas_seconds = forwards.iter().map(|f| f.mas_seconds).sum();

        self.model.zero_grad();
        let w = S::of(1.0 / b);
        for f in &forwards {
            self.model.backward_sample(f, w)?;
        }
        let grad_norm = clip_grad_norm(&mut self.model, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(GlowError::NonFinite("gradient norm".into()));
        }
        let lr = noam_lr(
            self.step + 1,
            self.config.warmup_steps,
            self.config.learning_rate_scale,
            self.model.config().attention_hidden,
        );
        let before = self.model.flat_values();
        let adam_before = self.adam.clone();
        let cfg = self.adam_config();
        adam_step(&mut self.model, &mut self.adam, lr, cfg);
        if let Err(e) = self.model.decoder.check_invertible() {
            self.model.set_flat_values(&before);
            self.adam = adam_before;
            return Err(e);
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            learning_rate: lr,
            losses,
            grad_norm,
            mas_seconds,
            step_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Sample indices of training batch `step` (0-based). Each epoch visits a
/// seeded permutation of the data; a trailing partial batch is skipped.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let size = batch.min(n);
    if size == 0 {
        return Vec::new();
    }
    let per_epoch = n / size;
    let epoch = (step / per_epoch) as u64;
    let k = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
    order.shuffle(&mut rng);
    order[k * size..(k + 1) * size].to_vec()
}

/// Mean per-sample losses with dropout off and MAS alignments.
pub fn evaluate<S: Scalar>(model: &GlowTts<S>, samples: &[Sample<S>]) -> Result<LossBundle> {
    let mut nll = 0.0;
    let mut dur = 0.0;
    for s in samples {
        let f = model.forward_sample(s, None, &mut Ctx::eval())?;
        nll += f.losses.nll;
        dur += f.losses.duration_loss;
    }
    let n = samples.len().max(1) as f64;
    LossBundle::new(nll / n, dur / n)
}

/// Alignment and duration quality on samples with known ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    /// Fraction of tokens whose MAS duration equals the true one.
    pub token_accuracy: f64,
    /// Mean |predicted - true| duration in frames, using the inference
    /// discretisation at unit length scale.
    pub duration_mae: f64,
    pub tokens: usize,
    /// Samples skipped because dropping an odd last frame empties a token.
    pub skipped: usize,
}

pub fn alignment_report<S: Scalar>(model: &GlowTts<S>, samples: &[SyntheticSample]) -> Result<AlignmentReport> {
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut abs_err = 0.0;
    let mut skipped = 0usize;
    for s in samples {
        let frames = s.mel.cols() - s.mel.cols() % 2;
        let Ok(truth) = s.alignment.truncate_to(frames) else {
            skipped += 1;
            continue;
        };
        let sample = s.to_sample::<S>();
        let f = model.forward_sample(&sample, None, &mut Ctx::eval())?;
        let (hidden, _) = model.encode(&s.tokens)?;
        let predicted = durations_from_log(&model.predict_log_durations(&hidden)?, 1.0);
        for ((&a, &t), (&p, &full)) in f
            .alignment
            .durations()
            .iter()
            .zip(truth.durations())
            .zip(predicted.iter().zip(s.alignment.durations()))
        {
            correct += usize::from(a == t);
            abs_err += (p as f64 - full as f64).abs();
            tokens += 1;
        }
    }
    let n = tokens.max(1) as f64;
    Ok(AlignmentReport { token_accuracy: correct as f64 / n, duration_mae: abs_err / n, tokens, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(10, 2, s, 3)).collect();
        assert_eq!(seen.len(), 8);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(batch_indices(10, 2, 1, 3), batch_indices(10, 2, 1, 3));
        assert_ne!(batch_indices(10, 2, 0, 3), batch_indices(10, 2, 5, 3));
        assert_eq!(batch_indices(3, 8, 0, 0).len(), 3);
    }

    #[test]
    fn noam_schedule_shape() {
        let peak = noam_lr(4000, 4000, 1.0, 192);
        assert!((peak - 192f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        let ratio = noam_lr(1, 4000, 1.0, 192) / peak;
        assert!((ratio - 1.0 / 4000.0).abs() < 1e-12);
        let lrs: Vec<f64> = (1..8000).map(|s| noam_lr(s, 4000, 1.0, 192)).collect();
        assert!(lrs[..3999].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[3999..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = vec![1.0f64, -2.0];
        let mut st = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut st, 0.1, AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0]);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        adam_update(&mut p, &[0.0, 0.0], &mut st, 0.0, AdamConfig::default());
        assert!((st.m[0] - 0.45).abs() < 1e-15);
        assert!((st.v[0] - 0.245).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0f64, 0.0];
        let mut st = AdamState::new(2);
        adam_update(&mut p, &[3.0, -0.01], &mut st, 0.01, AdamConfig::default());
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn grad_check_flags_errors() {
        let f = |x: &[f64]| x[0] * x[0] * 3.0 + x[0] * x[1] - x[1] * x[1];
        let x = [0.7, -1.3];
        let g = [6.0 * 0.7 - 1.3, 0.7 + 2.6];
        assert!(grad_check(&x, f, &g, 1e-4).max_relative_error < 1e-9);
        let bad = [g[0] * 1.1, g[1]];
        assert!(grad_check(&x, f, &bad, 1e-4).max_relative_error > 1e-2);
    }

    #[test]
    fn synthetic_dataset_properties() {
        let spec = SyntheticSpec { samples: 20, ..SyntheticSpec::default() };
        let a = make_synthetic_dataset(&spec).unwrap();
        let b = make_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert_eq!(s.mel.cols(), s.alignment.durations().iter().sum::<usize>());
            assert!(s.tokens.windows(2).all(|w| w[0] != w[1]));
            for (&t, &d) in s.tokens.iter().zip(s.alignment.durations()) {
                assert_eq!(d, a.token_durations[t]);
            }
        }
        assert!(SyntheticSpec::parse("vocab=4, noise=0.5\nseed=3").is_ok());
        assert!(SyntheticSpec::parse("vocab=4, colour=3").is_err());
    }
}
