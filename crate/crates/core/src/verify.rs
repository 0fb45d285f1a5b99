//! Numerical verification suites behind `glowtts verify`.
//!
//! Every check can be artificially broken by name; the fault is injected
//! into the quantity the check measures, so a passing broken run means the
//! check itself is blind.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{GlowError, Result};
use crate::flow::{mixing_groups, squeeze, CouplingSpec, DecoderSpec, FlowDecoder};
use crate::io::{decode_mel, encode_mel, Checkpoint};
use crate::mas::{brute_force_alignment, log_likelihood_grid, mas_search};
use crate::model::{GlowTts, Sample};
use crate::nn::{Ctx, Module};
use crate::scalar::Scalar;
use crate::tensor::{Lu, Matrix};
use crate::training::{model_grad_check, AdamState};
use crate::types::PriorStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mas,
    Flows,
    Grads,
    Formats,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mas" => Self::Mas,
            "flows" => Self::Flows,
            "grads" => Self::Grads,
            "formats" => Self::Formats,
            "all" => Self::All,
            _ => return None,
        })
    }

    pub fn checks(self) -> Vec<&'static str> {
        CHECKS
            .iter()
            .filter(|(_, s)| self == Suite::All || *s == self)
            .map(|(n, _)| *n)
            .collect()
    }
}

pub const CHECKS: &[(&str, Suite)] = &[
    ("mas-oracle", Suite::Mas),
    ("mas-speed", Suite::Mas),
    ("flow-roundtrip", Suite::Flows),
    ("logdet-decoder", Suite::Flows),
    ("logdet-actnorm", Suite::Flows),
    ("logdet-invconv", Suite::Flows),
    ("logdet-coupling", Suite::Flows),
    ("mixing-groups", Suite::Flows),
    ("grad-nll", Suite::Grads),
    ("grad-duration", Suite::Grads),
    ("stop-gradient", Suite::Grads),
    ("mel-roundtrip", Suite::Formats),
    ("checkpoint-roundtrip", Suite::Formats),
];

pub fn is_check(name: &str) -> bool {
    CHECKS.iter().any(|(n, _)| *n == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

pub const MAS_ORACLE_TOL: f64 = 1e-9;
pub const LOGDET_TOL: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ROUNDTRIP_TOL_F32: f64 = 1e-4;
pub const ROUNDTRIP_TOL_F64: f64 = 1e-8;

/// Runs the checks of `suite`, injecting a fault into `broken` if given.
pub fn run_suite(suite: Suite, broken: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(b) = broken {
        if !is_check(b) {
            return Err(GlowError::Config(format!("unknown check `{b}`")));
        }
    }
    let wanted = suite.checks();
    let on = |n: &str| wanted.contains(&n);
    let brk = |n: &str| broken == Some(n);
    let mut out = Vec::new();

    if on("mas-oracle") {
        let r = mas_oracle(500, 0, brk("mas-oracle"))?;
        out.push(r.result());
    }
    if on("mas-speed") {
        out.push(mas_speed(brk("mas-speed"))?.result());
    }
    if on("flow-roundtrip") {
        out.push(flow_roundtrip(&ModelConfig::paper(), 2, 64, brk("flow-roundtrip"))?.result());
    }
    let logdets = ["logdet-decoder", "logdet-actnorm", "logdet-invconv", "logdet-coupling"];
    if logdets.iter().any(|n| on(n)) {
        let r = logdet_checks(broken)?;
        for (name, ld) in logdets.iter().zip(r) {
            if on(name) {
                out.push(ld.result(name));
            }
        }
    }
    if on("mixing-groups") {
        out.push(mixing_check(brk("mixing-groups")));
    }
    if on("grad-nll") || on("grad-duration") || on("stop-gradient") {
        let g = gradient_checks(broken)?;
        for r in g {
            if on(r.name) {
                out.push(r);
            }
        }
    }
    if on("mel-roundtrip") {
        out.push(mel_roundtrip(brk("mel-roundtrip"))?);
    }
    if on("checkpoint-roundtrip") {
        out.push(checkpoint_roundtrip(brk("checkpoint-roundtrip"))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasOracleReport {
    pub instances: usize,
    pub max_gap: f64,
    /// Instances whose returned alignment does not score exactly Q*.
    pub score_mismatches: usize,
    pub seconds: f64,
}

impl MasOracleReport {
    pub fn passed(&self) -> bool {
        self.max_gap < MAS_ORACLE_TOL && self.score_mismatches == 0 && self.seconds < 5.0
    }

    pub fn result(&self) -> CheckResult {
        CheckResult::new(
            "mas-oracle",
            self.passed(),
            format!(
                "{} instances, max |Q* - brute| = {:.2e}, {} score mismatches, {:.3} s",
                self.instances, self.max_gap, self.score_mismatches, self.seconds
            ),
        )
    }
}

/// MAS against exhaustive search on random Gaussian instances
/// (T_text in 1..=6, T_mel in T_text..=10, D in 1..=4).
pub fn mas_oracle(instances: usize, seed: u64, broken: bool) -> Result<MasOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let started = Instant::now();
    let (mut max_gap, mut mismatches) = (0.0f64, 0);
    for _ in 0..instances {
        let t_text = rng.random_range(1..=6);
        let t_mel = rng.random_range(t_text..=10);
        let d = rng.random_range(1..=4);
        let z = Matrix::from_fn(d, t_mel, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = Matrix::from_fn(d, t_text, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = Matrix::from_fn(d, t_text, |_, _| rng.random_range(0.5..2.0));
        let grid = log_likelihood_grid(&z, &PriorStats::new(mean, scale)?)?;
        let mut fast = mas_search(&grid)?;
        if broken {
            fast.max_log_likelihood += 1e-6;
        }
        let slow = brute_force_alignment(&grid)?;
        max_gap = max_gap.max((fast.max_log_likelihood - slow.max_log_likelihood).abs());
        if grid.score(&fast.alignment) != fast.max_log_likelihood {
            mismatches += 1;
        }
    }
    Ok(MasOracleReport {
        instances,
        max_gap,
        score_mismatches: mismatches,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn random_grid(t_text: usize, t_mel: usize, rng: &mut ChaCha8Rng) -> Result<crate::mas::LogLikelihoodGrid<f64>> {
    let v = (0..t_text * t_mel).map(|_| rng.random_range(-10.0..0.0)).collect();
    crate::mas::LogLikelihoodGrid::new(Matrix::from_vec(t_text, t_mel, v)?)
}

/// Best-of-`iters` wall time of one search, in seconds.
pub fn time_mas(t_text: usize, t_mel: usize, iters: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = random_grid(t_text, t_mel, &mut rng)?;
    let mut best = f64::INFINITY;
    for _ in 0..iters.max(1) {
        let t = Instant::now();
        std::hint::black_box(mas_search(std::hint::black_box(&grid))?);
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasSpeedReport {
    pub seconds: f64,
    pub doubled_seconds: f64,
}

impl MasSpeedReport {
    pub fn ratio(&self) -> f64 {
        self.doubled_seconds / self.seconds
    }

    pub fn passed(&self) -> bool {
        self.seconds < 0.020 && self.ratio() <= 3.0
    }

    pub fn result(&self) -> CheckResult {
        CheckResult::new(
            "mas-speed",
            self.passed(),
            format!(
                "200x800 in {:.3} ms, 200x1600 in {:.3} ms (ratio {:.2})",
                self.seconds * 1e3,
                self.doubled_seconds * 1e3,
                self.ratio()
            ),
        )
    }
}

pub fn mas_speed(broken: bool) -> Result<MasSpeedReport> {
    let mut seconds = time_mas(200, 800, 15, 1)?;
    let doubled_seconds = time_mas(200, 1600, 15, 2)?;
    if broken {
        seconds += 0.020;
    }
    Ok(MasSpeedReport { seconds, doubled_seconds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTripReport {
    pub inputs: usize,
    pub frames: usize,
    pub max_error_f32: f64,
    pub max_error_f64: f64,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.max_error_f32 < ROUNDTRIP_TOL_F32 && self.max_error_f64 < ROUNDTRIP_TOL_F64
    }

    pub fn result(&self) -> CheckResult {
        CheckResult::new(
            "flow-roundtrip",
            self.passed(),
            format!(
                "{} inputs x {} frames: f32 {:.2e}, f64 {:.2e}",
                self.inputs, self.frames, self.max_error_f32, self.max_error_f64
            ),
        )
    }
}

/// Noise scale of the round-trip decoder. Unit-normal mels then map to
/// latents of magnitude ~10; much larger noise makes the flow so expansive
/// that single-precision error grows with the latent scale.
pub const ROUNDTRIP_PERTURBATION: f64 = 0.02;

/// A decoder with every parameter moved off its initial value by Gaussian
/// noise of scale `std`, so that actnorm, mixing and coupling are all
/// non-trivial.
pub fn perturbed_decoder<S: Scalar>(spec: DecoderSpec, seed: u64, std: f64) -> Result<FlowDecoder<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = FlowDecoder::new(DecoderSpec { data_init: false, ..spec }, &mut rng)?;
    dec.perturb(std, &mut rng);
    dec.check_invertible()?;
    Ok(dec)
}

fn roundtrip_error<S: Scalar>(config: &ModelConfig, inputs: usize, frames: usize, broken: bool) -> Result<f64> {
    let spec = config.decoder_spec();
    let dec = perturbed_decoder::<S>(spec, 17, ROUNDTRIP_PERTURBATION)?;
    let speaker = (spec.num_speakers > 0).then_some(0);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = Matrix::from_fn(spec.mel_channels, frames, |_, _| S::of(rng.sample::<f64, _>(StandardNormal)));
        let (z, _, _) = dec.inverse(&x, speaker, &mut Ctx::eval())?;
        let mut back = dec.forward(&z, speaker)?;
        if broken {
            back.as_mut_slice()[0] += S::of(1e-3);
        }
        worst = worst.max(back.max_abs_diff(&x.truncate_cols(z.cols())).as_f64());
    }
    Ok(worst)
}

/// mel -> latent -> mel through the decoder of `config`, in both precisions.
pub fn flow_roundtrip(config: &ModelConfig, inputs: usize, frames: usize, broken: bool) -> Result<RoundTripReport> {
    Ok(RoundTripReport {
        inputs,
        frames,
        max_error_f32: roundtrip_error::<f32>(config, inputs, frames, broken)?,
        max_error_f64: roundtrip_error::<f64>(config, inputs, frames, broken)?,
    })
}

/// log|det J| of `f` at `x` from a central-difference Jacobian.
pub fn numeric_log_abs_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], epsilon: f64) -> f64 {
    let n = x.len();
    let mut jac = Matrix::zeros(n, n);
    let mut probe = x.to_vec();
    for c in 0..n {
        probe[c] = x[c] + epsilon;
        let hi = f(&probe);
        probe[c] = x[c] - epsilon;
        let lo = f(&probe);
        probe[c] = x[c];
        assert_eq!(hi.len(), n, "map must be square");
        for r in 0..n {
            jac.set(r, c, (hi[r] - lo[r]) / (2.0 * epsilon));
        }
    }
    Lu::new(&jac).log_abs_det().0
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogdetReport {
    pub analytic: f64,
    pub numeric: f64,
}

impl LogdetReport {
    pub fn error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn passed(&self) -> bool {
        self.error() < LOGDET_TOL
    }

    pub fn result(&self, name: &'static str) -> CheckResult {
        CheckResult::new(
            name,
            self.passed(),
            format!("analytic {:.9}, numeric {:.9}, error {:.2e}", self.analytic, self.numeric, self.error()),
        )
    }
}

pub fn tiny_decoder_spec() -> DecoderSpec {
    DecoderSpec {
        mel_channels: 4,
        blocks: 2,
        groups: 2,
        coupling: CouplingSpec { hidden: 6, layers: 2, kernel: 3, dilation_rate: 1, dropout: 0.0, cond_dim: 0 },
        num_speakers: 0,
        data_init: false,
    }
}

/// Whole-decoder, actnorm, 1x1 and coupling log-determinants of a perturbed
/// tiny decoder (4 channels, 2 blocks, g = 2, T = 6), in that order.
pub fn logdet_checks(broken: Option<&str>) -> Result<[LogdetReport; 4]> {
    const EPS: f64 = 1e-5;
    let dec = perturbed_decoder::<f64>(tiny_decoder_spec(), 5, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, t) = (4, 6);
    let z = Matrix::from_fn(d, t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let fault = |name: &str| if broken == Some(name) { 1e-3 } else { 0.0 };

    let as_matrix = |rows: usize, v: &[f64]| Matrix::from_vec(rows, v.len() / rows, v.to_vec()).unwrap();
    let (_, lds) = dec.forward_with_logdet(&z, None)?;
    let whole = LogdetReport {
        analytic: lds.iter().sum::<f64>() + fault("logdet-decoder"),
        numeric: numeric_log_abs_det(|v| dec.forward(&as_matrix(d, v), None).unwrap().into_vec(), z.as_slice(), EPS),
    };

    let block = &dec.blocks[0];
    let h = squeeze(&z)?;
    let c = h.rows();
    let layer = |f: &dyn Fn(&Matrix<f64>) -> Result<(Matrix<f64>, f64)>, name: &str| -> Result<LogdetReport> {
        Ok(LogdetReport {
            analytic: f(&h)?.1 + fault(name),
            numeric: numeric_log_abs_det(|v| f(&as_matrix(c, v)).unwrap().0.into_vec(), h.as_slice(), EPS),
        })
    };
    let actnorm = layer(&|x| block.actnorm.forward(x), "logdet-actnorm")?;
    let invconv = layer(&|x| block.invconv.forward(x), "logdet-invconv")?;
    let coupling = layer(&|x| block.coupling.forward(x, None), "logdet-coupling")?;
    Ok([whole, actnorm, invconv, coupling])
}

/// The labeled 8-channel example for g = 2 and g = 4.
pub fn mixing_check(broken: bool) -> CheckResult {
    let labels = ["a", "b", "g", "h", "m", "n", "s", "t"];
    let named = |g: usize| -> Vec<String> {
        let mut groups = mixing_groups(8, g).unwrap_or_default();
        if broken {
            groups.reverse();
        }
        groups.iter().map(|ch| ch.iter().map(|&i| labels[i]).collect()).collect()
    };
    let (g2, g4) = (named(2), named(4));
    let passed = g2 == ["abmn", "ghst"] && g4 == ["am", "bn", "gs", "ht"];
    CheckResult::new("mixing-groups", passed, format!("g=2 {g2:?}, g=4 {g4:?}"))
}

/// The tiny full model of the gradient suite: encoder width 8 with one
/// block, a 2-block decoder, two speakers, and perturbed parameters.
pub fn grad_check_setup() -> Result<(GlowTts<f64>, Sample<f64>)> {
    let cfg = ModelConfig {
        vocab_size: 5,
        mel_channels: 4,
        embedding_dim: 8,
        attention_hidden: 8,
        prenet_hidden: 8,
        prenet_kernel: 3,
        encoder_blocks: 1,
        attention_heads: 1,
        max_relative_position: 2,
        encoder_filter: 8,
        duration_filter: 6,
        decoder_blocks: 2,
        decoder_groups: 2,
        coupling_layers: 2,
        coupling_kernel: 3,
        coupling_filter: 6,
        num_speakers: 2,
        speaker_dim: 3,
        ..ModelConfig::desk()
    };
    let mut model = GlowTts::<f64>::new(&cfg, 1)?;
    let mel = Matrix::from_fn(4, 10, |r, c| ((r * 10 + c) as f64 * 0.37).sin());
    let sample = Sample { tokens: vec![1, 3, 2, 4], mel, speaker: Some(1) };
    model.initialize(&[&sample])?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (_, p) in model.named_params_mut() {
        for v in &mut p.value {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok((model, sample))
}

/// `grad-nll`, `grad-duration` and `stop-gradient` results.
pub fn gradient_checks(broken: Option<&str>) -> Result<Vec<CheckResult>> {
    let (model, sample) = grad_check_setup()?;
    let r = model_grad_check(&model, &sample, 1e-4)?;
    let fault = |name: &str| if broken == Some(name) { 1e-2 } else { 0.0 };
    let nll = r.nll.max_relative_error + fault("grad-nll");
    let dur = r.duration.max_relative_error + fault("grad-duration");
    let leak = r.duration_grad_on_encoder + fault("stop-gradient");
    Ok(vec![
        CheckResult::new(
            "grad-nll",
            nll < GRAD_TOL,
            format!("{} parameters, max relative error {nll:.2e}", r.nll.checked),
        ),
        CheckResult::new(
            "grad-duration",
            dur < GRAD_TOL,
            format!("{} parameters, max relative error {dur:.2e}", r.duration.checked),
        ),
        CheckResult::new(
            "stop-gradient",
            leak == 0.0,
            format!("max |duration-loss gradient| on encoder parameters {leak:e}"),
        ),
    ])
}

fn bits<S: Scalar>(v: &[S]) -> Vec<u64> {
    v.iter().map(|x| x.as_f64().to_bits()).collect()
}

pub fn mel_roundtrip(broken: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m32 = Matrix::from_fn(80, 37, |_, _| rng.sample::<f32, _>(StandardNormal));
    let m64 = Matrix::from_fn(80, 37, |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-7);
    let mut b32 = encode_mel(&m32)?;
    if broken {
        let last = b32.len() - 1;
        b32[last] ^= 1;
    }
    let back32: Matrix<f32> = decode_mel(&b32)?.0;
    let back64: Matrix<f64> = decode_mel(&encode_mel(&m64)?)?.0;
    let empty: Matrix<f32> = decode_mel(&encode_mel(&Matrix::<f32>::zeros(80, 0))?)?.0;
    let passed = bits(back32.as_slice()) == bits(m32.as_slice())
        && bits(back64.as_slice()) == bits(m64.as_slice())
        && empty.shape() == (80, 0);
    Ok(CheckResult::new("mel-roundtrip", passed, "f32 80x37, f64 80x37, empty 80x0".into()))
}

pub fn checkpoint_roundtrip(broken: bool) -> Result<CheckResult> {
    let run = RunConfig::preset(crate::config::Preset::Desk);
    let mut model = GlowTts::<f32>::new(&run.model, 3)?;
    model.decoder.mark_initialized();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (_, p) in model.named_params_mut() {
        for v in &mut p.value {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
    let n = model.num_params();
    let adam = AdamState {
        step: 42,
        m: (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        v: (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect(),
    };
    let ckpt = Checkpoint::from_model(&model, &run, 42, Some(&adam));
    let mut bytes = ckpt.encode()?;
    if broken {
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
    }
    let back = Checkpoint::<f32>::decode(&bytes)?;
    let loaded = back.to_model()?;
    let opt = back.optimizer.as_ref();
    let passed = bits(&loaded.flat_values()) == bits(&model.flat_values())
        && opt.map(|o| (o.step, bits(&o.m), bits(&o.v))) == Some((adam.step, bits(&adam.m), bits(&adam.v)))
        && back.step == 42
        && back.config == ckpt.config
        && loaded.decoder.is_initialized();
    Ok(CheckResult::new(
        "checkpoint-roundtrip",
        passed,
        format!("{n} parameters plus optimizer state, {} bytes", bytes.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_partition_the_checks() {
        let total: usize = [Suite::Mas, Suite::Flows, Suite::Grads, Suite::Formats]
            .iter()
            .map(|s| s.checks().len())
            .sum();
        assert_eq!(total, CHECKS.len());
        assert_eq!(Suite::All.checks().len(), CHECKS.len());
    }

    #[test]
    fn unknown_break_is_rejected() {
        assert!(run_suite(Suite::Mas, Some("nope")).is_err());
    }

    #[test]
    fn mixing_and_formats_detect_faults() {
        assert!(mixing_check(false).passed);
        assert!(!mixing_check(true).passed);
        assert!(mel_roundtrip(false).unwrap().passed);
        assert!(!mel_roundtrip(true).unwrap().passed);
        assert!(checkpoint_roundtrip(false).unwrap().passed);
        assert!(!checkpoint_roundtrip(true).unwrap().passed);
    }

    #[test]
    fn logdets_agree() {
        for r in logdet_checks(None).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
