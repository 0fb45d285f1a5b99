//! Flat `key = value` configuration with `#` comments.
//!
//! A file may name a `preset` (`paper` or `desk`); its values are applied
//! first and every other line overrides one key. Unknown and repeated keys
//! are errors. [`RunConfig::to_text`] writes every key, so parsing its output
//! gives back the same config.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::encoder::{DurationSpec, EncoderSpec};
use crate::error::{GlowError, Result};
use crate::flow::{CouplingSpec, DecoderSpec};
use crate::scalar::Precision;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub mel_channels: usize,
    pub num_speakers: usize,
    pub speaker_dim: usize,
    pub embedding_dim: usize,
    pub prenet_layers: usize,
    pub prenet_hidden: usize,
    pub prenet_kernel: usize,
    pub prenet_dropout: f64,
    pub encoder_blocks: usize,
    pub attention_hidden: usize,
    pub attention_heads: usize,
    pub max_relative_position: usize,
    pub encoder_kernel: usize,
    pub encoder_filter: usize,
    pub encoder_dropout: f64,
    pub duration_kernel: usize,
    pub duration_filter: usize,
    pub duration_dropout: f64,
    pub decoder_blocks: usize,
    pub decoder_data_init: bool,
    pub decoder_groups: usize,
    pub coupling_dilation: usize,
    pub coupling_layers: usize,
    pub coupling_kernel: usize,
    pub coupling_filter: usize,
    pub decoder_dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub precision: Precision,
    pub seed: Option<u64>,
    pub learning_rate_scale: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub workers: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(GlowError::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl ModelConfig {
    /// Published LJSpeech hyper-parameters. Vocabulary size, speaker count
    /// and the duration predictor dropout are not part of that table.
    pub fn paper() -> Self {
        Self {
            vocab_size: 148,
            mel_channels: 80,
            num_speakers: 1,
            speaker_dim: 256,
            embedding_dim: 192,
            prenet_layers: 3,
            prenet_hidden: 192,
            prenet_kernel: 5,
            prenet_dropout: 0.5,
            encoder_blocks: 6,
            attention_hidden: 192,
            attention_heads: 2,
            max_relative_position: 4,
            encoder_kernel: 3,
            encoder_filter: 768,
            encoder_dropout: 0.1,
            duration_kernel: 3,
            duration_filter: 256,
            duration_dropout: 0.1,
            decoder_blocks: 12,
            decoder_data_init: true,
            decoder_groups: 40,
            coupling_dilation: 1,
            coupling_layers: 4,
            coupling_kernel: 5,
            coupling_filter: 192,
            decoder_dropout: 0.05,
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            vocab_size: 16,
            mel_channels: 8,
            num_speakers: 1,
            speaker_dim: 8,
            embedding_dim: 32,
            prenet_layers: 3,
            prenet_hidden: 32,
            prenet_kernel: 5,
            prenet_dropout: 0.5,
            encoder_blocks: 2,
            attention_hidden: 32,
            attention_heads: 2,
            max_relative_position: 4,
            encoder_kernel: 3,
            encoder_filter: 64,
            encoder_dropout: 0.1,
            duration_kernel: 3,
            duration_filter: 32,
            duration_dropout: 0.1,
            decoder_blocks: 4,
            decoder_data_init: true,
            decoder_groups: 4,
            coupling_dilation: 1,
            coupling_layers: 2,
            coupling_kernel: 5,
            coupling_filter: 32,
            decoder_dropout: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlowError::Config(m));
        if self.embedding_dim != self.attention_hidden {
            return bad(format!(
                "embedding_dim ({}) must equal attention_hidden ({})",
                self.embedding_dim, self.attention_hidden
            ));
        }
        if self.attention_heads == 0 || !self.attention_hidden.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "attention_hidden {} is not divisible by {} heads",
                self.attention_hidden, self.attention_heads
            ));
        }
        for (name, k) in [
            ("prenet_kernel", self.prenet_kernel),
            ("encoder_kernel", self.encoder_kernel),
            ("duration_kernel", self.duration_kernel),
            ("coupling_kernel", self.coupling_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        for (name, p) in [
            ("prenet_dropout", self.prenet_dropout),
            ("encoder_dropout", self.encoder_dropout),
            ("duration_dropout", self.duration_dropout),
            ("decoder_dropout", self.decoder_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("mel_channels", self.mel_channels),
            ("num_speakers", self.num_speakers),
            ("embedding_dim", self.embedding_dim),
            ("prenet_hidden", self.prenet_hidden),
            ("encoder_filter", self.encoder_filter),
            ("duration_filter", self.duration_filter),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_groups", self.decoder_groups),
            ("coupling_layers", self.coupling_layers),
            ("coupling_filter", self.coupling_filter),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.mel_channels.is_multiple_of(self.decoder_groups) {
            return bad(format!(
                "{} squeezed channels do not split into {} groups",
                2 * self.mel_channels,
                self.decoder_groups
            ));
        }
        if self.num_speakers > 1 && self.speaker_dim == 0 {
            return bad("multi-speaker models need speaker_dim > 0".into());
        }
        Ok(())
    }

    pub fn is_multi_speaker(&self) -> bool {
        self.num_speakers > 1
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            vocab: self.vocab_size,
            hidden: self.attention_hidden,
            prenet_layers: self.prenet_layers,
            prenet_hidden: self.prenet_hidden,
            prenet_kernel: self.prenet_kernel,
            prenet_dropout: self.prenet_dropout,
            blocks: self.encoder_blocks,
            heads: self.attention_heads,
            window: self.max_relative_position,
            ffn_kernel: self.encoder_kernel,
            ffn_filter: self.encoder_filter,
            dropout: self.encoder_dropout,
            out_dim: self.mel_channels,
        }
    }

    pub fn duration_spec(&self) -> DurationSpec {
        DurationSpec {
            hidden: self.attention_hidden,
            kernel: self.duration_kernel,
            filter: self.duration_filter,
            dropout: self.duration_dropout,
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        let speakers = if self.is_multi_speaker() { self.num_speakers } else { 0 };
        DecoderSpec {
            mel_channels: self.mel_channels,
            blocks: self.decoder_blocks,
            groups: self.decoder_groups,
            coupling: CouplingSpec {
                hidden: self.coupling_filter,
                layers: self.coupling_layers,
                kernel: self.coupling_kernel,
                dilation_rate: self.coupling_dilation,
                dropout: self.decoder_dropout,
                cond_dim: if speakers > 0 { self.speaker_dim } else { 0 },
            },
            num_speakers: speakers,
            data_init: self.decoder_data_init,
        }
    }
}

impl TrainConfig {
    pub fn defaults() -> Self {
        Self {
            precision: Precision::Single,
            seed: None,
            learning_rate_scale: 1.0,
            warmup_steps: 4000,
            batch_size: 8,
            max_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: 5.0,
            workers: 1,
            log_every: 10,
            checkpoint_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(GlowError::Config(
                "warmup_steps, batch_size and workers must be at least 1".into(),
            ));
        }
        if self.learning_rate_scale <= 0.0 || self.grad_clip <= 0.0 {
            return Err(GlowError::Config("learning_rate_scale and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GlowError::Config(format!("invalid value `{value}` for `{key}`")))
}

macro_rules! config_keys {
    ($($section:ident . $field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($field)),*];

        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                "precision" => {
                    cfg.train.precision = Precision::parse(value)
                        .ok_or_else(|| GlowError::Config(format!("unknown precision `{value}`")))?
                }
                "seed" => {
                    cfg.train.seed = if value == "none" { None } else { Some(parse_value(key, value)?) }
                }
                $(stringify!($field) => cfg.$section.$field = parse_value(key, value)?,)*
                other => return Err(GlowError::Config(format!("unknown key `{other}`"))),
            }
            Ok(())
        }

        fn write_keys(cfg: &RunConfig, out: &mut String) {
            $(writeln!(out, "{} = {}", stringify!($field), cfg.$section.$field).unwrap();)*
        }
    };
}

config_keys!(
    model.vocab_size,
    model.mel_channels,
    model.num_speakers,
    model.speaker_dim,
    model.embedding_dim,
    model.prenet_layers,
    model.prenet_hidden,
    model.prenet_kernel,
    model.prenet_dropout,
    model.encoder_blocks,
    model.attention_hidden,
    model.attention_heads,
    model.max_relative_position,
    model.encoder_kernel,
    model.encoder_filter,
    model.encoder_dropout,
    model.duration_kernel,
    model.duration_filter,
    model.duration_dropout,
    model.decoder_blocks,
    model.decoder_data_init,
    model.decoder_groups,
    model.coupling_dilation,
    model.coupling_layers,
    model.coupling_kernel,
    model.coupling_filter,
    model.decoder_dropout,
    train.learning_rate_scale,
    train.warmup_steps,
    train.batch_size,
    train.max_steps,
    train.adam_beta1,
    train.adam_beta2,
    train.adam_eps,
    train.grad_clip,
    train.workers,
    train.log_every,
    train.checkpoint_every,
);

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        };
        Self {
            preset,
            model,
            train: TrainConfig::defaults(),
        }
    }

    /// Every accepted key, in file order (`preset`, `precision` and `seed`
    /// included).
    pub fn keys() -> Vec<&'static str> {
        let mut k = vec!["preset", "precision", "seed"];
        k.extend_from_slice(KEYS);
        k
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                GlowError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(seen, _): &(&str, &str)| *seen == k) {
                return Err(GlowError::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            pairs.push((k, v));
        }
        let preset = match pairs.iter().find(|(k, _)| *k == "preset") {
            Some((_, v)) => Preset::parse(v)?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs.into_iter().filter(|(k, _)| *k != "preset") {
            set_key(&mut cfg, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "preset = {}", self.preset.name()).unwrap();
        writeln!(out, "precision = {}", self.train.precision.name()).unwrap();
        match self.train.seed {
            Some(s) => writeln!(out, "seed = {s}").unwrap(),
            None => writeln!(out, "seed = none").unwrap(),
        }
        write_keys(self, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let m = ModelConfig::paper();
        assert_eq!(m.embedding_dim, 192);
        assert_eq!(m.encoder_blocks, 6);
        assert_eq!(m.max_relative_position, 4);
        assert_eq!(m.encoder_filter, 768);
        assert_eq!(m.duration_filter, 256);
        assert_eq!(m.decoder_blocks, 12);
        assert_eq!(m.decoder_groups, 40);
        assert_eq!(m.coupling_layers, 4);
        assert_eq!(m.decoder_dropout, 0.05);
        assert!(m.decoder_data_init);
        m.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let text = "preset = paper\nseed = 7 # fixed\nbatch_size=3\nprecision = double\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model, ModelConfig::paper());
        assert_eq!(cfg.train.seed, Some(7));
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.precision, Precision::Double);
        let echoed = cfg.to_text();
        let again = RunConfig::parse(&echoed).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), echoed);
        assert_eq!(echoed.lines().count(), RunConfig::keys().len());
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(GlowError::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("batch_size = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("prenet_kernel = 4").is_err());
    }
}
