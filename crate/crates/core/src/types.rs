//! Domain containers: token sequences, mel-spectrograms, alignments, prior statistics.

use crate::error::{GlowError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(GlowError::TooShort("token sequence is empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(GlowError::InvalidToken {
                id,
                vocab: vocab_size,
            });
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Channels x frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<S> {
    values: Matrix<S>,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn new(values: Matrix<S>) -> Self {
        Self { values }
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn into_values(self) -> Matrix<S> {
        self.values
    }
}

/// Monotonic surjective frame-to-token map, stored as per-token durations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Alignment {
    durations: Vec<usize>,
}

impl Alignment {
    pub fn from_durations(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() {
            return Err(GlowError::InvalidAlignment("no tokens".into()));
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(GlowError::InvalidAlignment(format!(
                "token {} has zero duration",
                i + 1
            )));
        }
        Ok(Self { durations })
    }

    /// Rebuilds durations from a 1-based frame-to-token map.
    pub fn from_index_map(map: &[usize], text_len: usize) -> Result<Self> {
        if map.is_empty() {
            return Err(GlowError::InvalidAlignment("empty index map".into()));
        }
        if map[0] != 1 {
            return Err(GlowError::InvalidAlignment(format!(
                "map starts at token {}, expected 1",
                map[0]
            )));
        }
        if *map.last().unwrap() != text_len {
            return Err(GlowError::InvalidAlignment(format!(
                "map ends at token {}, expected {}",
                map.last().unwrap(),
                text_len
            )));
        }
        let mut durations = vec![0usize; text_len];
        for (j, w) in map.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(GlowError::InvalidAlignment(format!(
                    "map decreases at frame {}",
                    j + 2
                )));
            }
            if w[1] > w[0] + 1 {
                return Err(GlowError::InvalidAlignment(format!(
                    "map skips from token {} to {} at frame {}",
                    w[0],
                    w[1],
                    j + 2
                )));
            }
        }
        for &i in map {
            durations[i - 1] += 1;
        }
        Self::from_durations(durations)
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn text_len(&self) -> usize {
        self.durations.len()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// 1-based A(j) for every frame.
    pub fn index_map(&self) -> Vec<usize> {
        self.frame_tokens().into_iter().map(|i| i + 1).collect()
    }

    /// 0-based token index of every frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_frames());
        for (i, &d) in self.durations.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, d));
        }
        out
    }

    /// Drops trailing frames so the alignment covers exactly `frames`.
    /// Fails if that would leave a token without frames.
    pub fn truncate_to(&self, frames: usize) -> Result<Self> {
        let total = self.total_frames();
        if frames > total {
            return Err(GlowError::InvalidAlignment(format!(
                "cannot extend {total} frames to {frames}"
            )));
        }
        let mut d = self.durations.clone();
        let mut excess = total - frames;
        while excess > 0 {
            let last = d.last_mut().unwrap();
            let take = excess.min(*last);
            *last -= take;
            excess -= take;
            if *last == 0 {
                return Err(GlowError::InvalidAlignment(format!(
                    "truncating to {frames} frames empties token {}",
                    d.len()
                )));
            }
        }
        Self::from_durations(d)
    }
}

/// Per-token Gaussian statistics, D x T_text each.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStats<S> {
    mean: Matrix<S>,
    scale: Matrix<S>,
}

impl<S: Scalar> PriorStats<S> {
    pub fn new(mean: Matrix<S>, scale: Matrix<S>) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(GlowError::Dimension(format!(
                "prior mean {:?} vs scale {:?}",
                mean.shape(),
                scale.shape()
            )));
        }
        if scale.as_slice().iter().any(|&s| !(s > S::zero())) {
            return Err(GlowError::Dimension(
                "prior scale must be strictly positive".into(),
            ));
        }
        Ok(Self { mean, scale })
    }

    /// sigma fixed to one.
    pub fn unit_scale(mean: Matrix<S>) -> Self {
        let scale = Matrix::filled(mean.rows(), mean.cols(), S::one());
        Self { mean, scale }
    }

    pub fn mean(&self) -> &Matrix<S> {
        &self.mean
    }

    pub fn scale(&self) -> &Matrix<S> {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.mean.rows()
    }

    pub fn text_len(&self) -> usize {
        self.mean.cols()
    }
}

pub fn durations_to_index_map(a: &Alignment) -> Vec<usize> {
    a.index_map()
}

pub fn index_map_to_durations(map: &[usize], text_len: usize) -> Result<Alignment> {
    Alignment::from_index_map(map, text_len)
}
