//! File formats: mel spectrograms, checkpoints, durations and loss logs.
//!
//! Mel file layout (all integers little-endian u32):
//!
//! ```text
//! "GTTSMEL1" channels frames precision(0 = f32, 1 = f64) values...
//! ```
//!
//! Values are row-major (channel by channel) little-endian floats.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{GlowError, Result};
use crate::model::GlowTts;
use crate::nn::Module;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Matrix;
use crate::training::{AdamState, StepReport};
use crate::types::{Alignment, MelSpectrogram, TokenSequence};

pub const MEL_MAGIC: &[u8; 8] = b"GTTSMEL1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GTTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            GlowError::Format(format!(
                "truncated {}: need {n} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn values<S: Scalar>(&mut self, n: usize, stored: Precision) -> Result<Vec<S>> {
        let width = stored.byte_width();
        let len = n.checked_mul(width).ok_or_else(|| GlowError::Format(format!("{} size overflows", self.what)))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match stored {
                Precision::Single => S::of(f32::read_le(c) as f64),
                Precision::Double => S::of(f64::read_le(c)),
            })
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(GlowError::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn precision_from_flag(flag: u32) -> Result<Precision> {
    Precision::from_flag(flag).ok_or_else(|| GlowError::Format(format!("unknown precision flag {flag}")))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GlowError::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_mel<S: Scalar>(mel: &Matrix<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + mel.as_slice().len() * S::PRECISION.byte_width());
    out.extend_from_slice(MEL_MAGIC);
    put_u32(&mut out, mel.rows())?;
    put_u32(&mut out, mel.cols())?;
    put_u32(&mut out, S::PRECISION.flag() as usize)?;
    for &v in mel.as_slice() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Values are converted if the file precision differs from `S`.
pub fn decode_mel<S: Scalar>(bytes: &[u8]) -> Result<(Matrix<S>, Precision)> {
    let mut r = Reader::new(bytes, "mel file");
    if r.take(8)? != MEL_MAGIC {
        return Err(GlowError::Format("bad mel magic".into()));
    }
    let channels = r.count()?;
    let frames = r.count()?;
    let precision = precision_from_flag(r.u32()?)?;
    let n = channels
        .checked_mul(frames)
        .ok_or_else(|| GlowError::Format(format!("{channels} x {frames} overflows")))?;
    let values = r.values(n, precision)?;
    r.finish()?;
    Ok((Matrix::from_vec(channels, frames, values)?, precision))
}

pub fn write_mel<S: Scalar>(path: &Path, mel: &MelSpectrogram<S>) -> Result<()> {
    fs::write(path, encode_mel(mel.values())?)?;
    Ok(())
}

pub fn read_mel<S: Scalar>(path: &Path) -> Result<MelSpectrogram<S>> {
    let bytes = fs::read(path)?;
    Ok(MelSpectrogram::new(decode_mel(&bytes)?.0))
}

/// Stored parameters and optimizer state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: RunConfig,
    pub step: u64,
    pub actnorm_initialized: bool,
    /// name, shape, values in model traversal order
    pub tensors: Vec<(String, Vec<usize>, Vec<S>)>,
    pub optimizer: Option<AdamState<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model(model: &GlowTts<S>, config: &RunConfig, step: u64, optimizer: Option<&AdamState<S>>) -> Self {
        let mut config = config.clone();
        config.model = model.config().clone();
        config.train.precision = S::PRECISION;
        Self {
            config,
            step,
            actnorm_initialized: model.decoder.is_initialized(),
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.shape.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<GlowTts<S>> {
        let mut model = GlowTts::new(&self.config.model, 0)?;
        {
            let params = model.named_params_mut();
            if params.len() != self.tensors.len() {
                return Err(GlowError::Format(format!(
                    "checkpoint has {} tensors, model has {}",
                    self.tensors.len(),
                    params.len()
                )));
            }
            for ((name, p), (tname, shape, values)) in params.into_iter().zip(&self.tensors) {
                if &name != tname || &p.shape != shape {
                    return Err(GlowError::Format(format!(
                        "checkpoint tensor {tname} {shape:?} does not match {name} {:?}",
                        p.shape
                    )));
                }
                p.value.copy_from_slice(values);
            }
        }
        if self.actnorm_initialized {
            model.decoder.mark_initialized();
        }
        if let Some(opt) = &self.optimizer {
            let n = model.num_params();
            if opt.m.len() != n || opt.v.len() != n {
                return Err(GlowError::Format("optimizer state size mismatch".into()));
            }
        }
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, S::PRECISION.flag() as usize)?;
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, usize::from(self.actnorm_initialized))?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, shape, values) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len())?;
            for &d in shape {
                put_u32(&mut out, d)?;
            }
            values.iter().for_each(|v| v.write_le(&mut out));
        }
        match &self.optimizer {
            None => put_u32(&mut out, 0)?,
            Some(opt) => {
                put_u32(&mut out, 1)?;
                out.extend_from_slice(&opt.step.to_le_bytes());
                put_u32(&mut out, opt.m.len())?;
                opt.m.iter().chain(&opt.v).for_each(|v| v.write_le(&mut out));
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(GlowError::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(GlowError::Format(format!("unsupported checkpoint version {version}")));
        }
        let precision = precision_from_flag(r.u32()?)?;
        if precision != S::PRECISION {
            return Err(GlowError::Format(format!(
                "checkpoint stores {} precision, {} requested",
                precision.name(),
                S::PRECISION.name()
            )));
        }
        let step = r.u64()?;
        let len = r.count()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GlowError::Format("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let actnorm_initialized = r.u32()? != 0;
        let count = r.count()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.count()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| GlowError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.count()?;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.count()?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                GlowError::Format(format!("tensor {name} {shape:?} overflows"))
            })?;
            let values = r.values(n, precision)?;
            tensors.push((name, shape, values));
        }
        let optimizer = match r.u32()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.count()?;
                let m = r.values(n, precision)?;
                let v = r.values(n, precision)?;
                Some(AdamState { step, m, v })
            }
            f => return Err(GlowError::Format(format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Self { config, step, actnorm_initialized, tensors, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Precision recorded in a checkpoint header, for dispatch before loading.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "checkpoint");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(GlowError::Format("bad checkpoint magic".into()));
    }
    r.u32()?;
    precision_from_flag(r.u32()?)
}

/// One `token_index duration` line per token, 1-based indices.
pub fn format_durations(a: &Alignment) -> String {
    a.durations().iter().enumerate().map(|(i, d)| format!("{} {d}\n", i + 1)).collect()
}

pub fn parse_durations(text: &str) -> Result<Alignment> {
    let mut durations = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| GlowError::Format(format!("durations line {}: `{line}`", n + 1)))
        };
        let index = parse(parts.next())?;
        let d = parse(parts.next())?;
        if parts.next().is_some() || index != durations.len() + 1 {
            return Err(GlowError::Format(format!(
                "durations line {}: expected index {}",
                n + 1,
                durations.len() + 1
            )));
        }
        durations.push(d);
    }
    Alignment::from_durations(durations)
}

/// A whitespace-separated id list, or the path of a file containing one.
pub fn parse_tokens(arg: &str, vocab: usize) -> Result<TokenSequence> {
    let text = if Path::new(arg).is_file() { fs::read_to_string(arg)? } else { arg.to_string() };
    let ids = text
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| GlowError::Format(format!("bad token id `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(GlowError::Format("no tokens given".into()));
    }
    TokenSequence::new(ids, vocab)
}

pub const LOSS_LOG_HEADER: &str = "# step lr nll duration_loss total grad_norm mas_fraction";

pub fn format_loss_line(r: &StepReport) -> String {
    format!(
        "{} {:.6e} {:.6} {:.6} {:.6} {:.4} {:.5}",
        r.step,
        r.learning_rate,
        r.losses.nll,
        r.losses.duration_loss,
        r.losses.total,
        r.grad_norm,
        r.mas_fraction()
    )
}

/// Appends lines to a plain-text log, creating it with a header.
pub fn append_log(path: &Path, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOSS_LOG_HEADER}")?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Durations plus per-frame means, for plotting.
pub fn format_frame_dump<S: Scalar>(a: &Alignment, frame_means: &Matrix<S>) -> String {
    let mut out = String::from("# frame token mean...\n");
    for (j, &i) in a.frame_tokens().iter().enumerate().take(frame_means.cols()) {
        out.push_str(&format!("{} {}", j + 1, i + 1));
        for r in 0..frame_means.rows() {
            out.push_str(&format!(" {}", frame_means.get(r, j)));
        }
        out.push('\n');
    }
    out
}
