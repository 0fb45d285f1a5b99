//! Flow-based parallel text-to-speech core.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below name the two concrete instantiations.

pub mod config;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod mas;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod types;
pub mod verify;

pub use config::{ModelConfig, Preset, RunConfig, TrainConfig};
pub use error::{GlowError, Result};
pub use flow::FlowDecoder;
pub use io::Checkpoint;
pub use model::{GlowTts, Sample};
pub use scalar::{Precision, Scalar};
pub use tensor::Matrix;
pub use training::Trainer;
pub use types::{Alignment, MelSpectrogram, PriorStats, TokenSequence};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type MelSpectrogram32 = MelSpectrogram<f32>;
pub type MelSpectrogram64 = MelSpectrogram<f64>;
pub type PriorStats32 = PriorStats<f32>;
pub type PriorStats64 = PriorStats<f64>;
pub type FlowDecoder32 = FlowDecoder<f32>;
pub type FlowDecoder64 = FlowDecoder<f64>;
pub type GlowTts32 = GlowTts<f32>;
pub type GlowTts64 = GlowTts<f64>;
pub type Sample32 = Sample<f32>;
pub type Sample64 = Sample<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
