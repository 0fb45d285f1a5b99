use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::{squeeze, unsqueeze, ActNorm, AffineCoupling, CouplingCache, CouplingSpec, GroupedInvConv};
use crate::error::{GlowError, Result};
use crate::nn::{impl_module, Ctx, Embedding, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderSpec {
    pub mel_channels: usize,
    pub blocks: usize,
    pub groups: usize,
    pub coupling: CouplingSpec,
    pub num_speakers: usize,
    /// Actnorm waits for data-dependent initialisation when set.
    pub data_init: bool,
}

/// actnorm -> grouped 1x1 conv -> affine coupling, in the latent-to-mel direction.
#[derive(Debug, Clone)]
pub struct FlowBlock<S> {
    pub actnorm: ActNorm<S>,
    pub invconv: GroupedInvConv<S>,
    pub coupling: AffineCoupling<S>,
}

impl_module!(FlowBlock { params: [], modules: [actnorm, invconv, coupling], lists: [], options: [] });

#[derive(Debug)]
pub struct FlowDecoder<S> {
    pub blocks: Vec<FlowBlock<S>>,
    pub speaker: Option<Embedding<S>>,
    spec: DecoderSpec,
    forward_passes: AtomicUsize,
}

impl<S: Scalar> Clone for FlowDecoder<S> {
    fn clone(&self) -> Self {
        Self {
            blocks: self.blocks.clone(),
            speaker: self.speaker.clone(),
            spec: self.spec,
            forward_passes: AtomicUsize::new(self.forward_passes.load(Ordering::Relaxed)),
        }
    }
}

impl_module!(FlowDecoder { params: [], modules: [], lists: [blocks], options: [speaker] });

#[derive(Debug, Clone)]
struct BlockCache<S> {
    coupling: CouplingCache<S>,
    invconv_in: Matrix<S>,
    actnorm_out: Matrix<S>,
}

/// Everything the mel-to-latent pass must keep for backward.
#[derive(Debug, Clone)]
pub struct DecoderCache<S> {
    blocks: Vec<BlockCache<S>>,
    speaker: Option<usize>,
    frames: usize,
}

impl<S: Scalar> FlowDecoder<S> {
    pub fn new(spec: DecoderSpec, rng: &mut impl Rng) -> Result<Self> {
        let squeezed = 2 * spec.mel_channels;
        if !squeezed.is_multiple_of(2 * spec.groups.max(1)) || spec.groups == 0 {
            return Err(GlowError::Config(format!(
                "{} squeezed channels do not split into {} groups",
                squeezed, spec.groups
            )));
        }
        let cond_dim = if spec.num_speakers > 0 { spec.coupling.cond_dim } else { 0 };
        let coupling = CouplingSpec { cond_dim, ..spec.coupling };
        let blocks = (0..spec.blocks)
            .map(|_| {
                let actnorm = if spec.data_init {
                    ActNorm::new(squeezed)
                } else {
                    ActNorm::identity(squeezed)
                };
                // identity mixing keeps the two squeezed frames apart until
                // the alignment has settled
                Ok(FlowBlock {
                    actnorm,
                    invconv: GroupedInvConv::identity(squeezed, spec.groups)?,
                    coupling: AffineCoupling::new(squeezed, coupling, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let speaker = (spec.num_speakers > 0 && cond_dim > 0).then(|| Embedding::new(spec.num_speakers, cond_dim, rng));
        Ok(Self {
            blocks,
            speaker,
            spec,
            forward_passes: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker.as_ref().map_or(0, |e| e.vocab())
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.is_initialized())
    }

    pub fn mark_initialized(&mut self) {
        for b in &mut self.blocks {
            b.actnorm.mark_initialized();
        }
    }

    /// Number of completed latent-to-mel passes since construction.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Sets every 1x1 kernel to the identity (the whole stack then reduces
    /// to affine coupling and actnorm).
    pub fn set_identity_mixing(&mut self) {
        for b in &mut self.blocks {
            let side = b.invconv.side();
            let w = &mut b.invconv.weight.value;
            for r in 0..side {
                for c in 0..side {
                    w[r * side + c] = if r == c { S::one() } else { S::zero() };
                }
            }
        }
    }

    fn speaker_vector(&self, speaker: Option<usize>) -> Result<Option<Vec<S>>> {
        match (&self.speaker, speaker) {
            (None, None) => Ok(None),
            (None, Some(id)) => Err(GlowError::UnknownSpeaker { id, count: 0 }),
            (Some(e), None) => Err(GlowError::Dimension(format!(
                "multi-speaker decoder ({} speakers) needs a speaker id",
                e.vocab()
            ))),
            (Some(e), Some(id)) => {
                if id >= e.vocab() {
                    return Err(GlowError::UnknownSpeaker { id, count: e.vocab() });
                }
                let d = e.dim();
                Ok(Some(e.table.value[id * d..(id + 1) * d].to_vec()))
            }
        }
    }

    fn check_channels(&self, x: &Matrix<S>) -> Result<()> {
        if x.rows() != self.spec.mel_channels {
            return Err(GlowError::Dimension(format!(
                "decoder expects {} mel channels, got {}",
                self.spec.mel_channels,
                x.rows()
            )));
        }
        Ok(())
    }

    /// Latent to mel. The frame count must be even.
    pub fn forward(&self, z: &Matrix<S>, speaker: Option<usize>) -> Result<Matrix<S>> {
        self.check_channels(z)?;
        if !z.cols().is_multiple_of(2) {
            return Err(GlowError::Dimension(format!(
                "decoder input needs an even frame count, got {}",
                z.cols()
            )));
        }
        let cond = self.speaker_vector(speaker)?;
        let mut h = squeeze(z)?;
        for b in &self.blocks {
            h = b.actnorm.forward(&h)?.0;
            h = b.invconv.forward(&h)?.0;
            h = b.coupling.forward(&h, cond.as_deref())?.0;
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        unsqueeze(&h)
    }

    /// Latent to mel, also returning the per-layer log-determinants.
    pub fn forward_with_logdet(&self, z: &Matrix<S>, speaker: Option<usize>) -> Result<(Matrix<S>, Vec<S>)> {
        self.check_channels(z)?;
        let cond = self.speaker_vector(speaker)?;
        let mut h = squeeze(z)?;
        let mut lds = Vec::with_capacity(3 * self.blocks.len());
        for b in &self.blocks {
            let (a, ld) = b.actnorm.forward(&h)?;
            lds.push(ld);
            let (a, ld) = b.invconv.forward(&a)?;
            lds.push(ld);
            let (a, ld) = b.coupling.forward(&a, cond.as_deref())?;
            lds.push(ld);
            h = a;
        }
        Ok((unsqueeze(&h)?, lds))
    }

    /// Mel to latent. An odd trailing frame is dropped; the log-determinant
    /// is that of the mel-to-latent map.
    pub fn inverse(&self, x: &Matrix<S>, speaker: Option<usize>, ctx: &mut Ctx) -> Result<(Matrix<S>, S, DecoderCache<S>)> {
        self.check_channels(x)?;
        let cond = self.speaker_vector(speaker)?;
        let mut h = squeeze(x)?;
        let mut logdet = S::zero();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.iter().rev() {
            let (a, ld_c, cc) = b.coupling.inverse(&h, cond.as_deref(), ctx)?;
            let (c, ld_w) = b.invconv.inverse(&a)?;
            let (d, ld_a) = b.actnorm.inverse(&c)?;
            logdet += ld_c + ld_w + ld_a;
            caches.push(BlockCache {
                coupling: cc,
                invconv_in: a,
                actnorm_out: d.clone(),
            });
            h = d;
        }
        caches.reverse();
        let z = unsqueeze(&h)?;
        let frames = z.cols();
        Ok((
            z,
            logdet,
            DecoderCache {
                blocks: caches,
                speaker,
                frames,
            },
        ))
    }

    /// Backpropagates `g_z` and a loss weight on the log-determinant through
    /// [`inverse`](Self::inverse). Returns the gradient w.r.t. the
    /// (truncated) mel input.
    pub fn inverse_backward(&mut self, cache: &DecoderCache<S>, g_z: &Matrix<S>, g_logdet: S) -> Result<Matrix<S>> {
        if g_z.cols() != cache.frames {
            return Err(GlowError::Dimension("latent gradient length".into()));
        }
        let mut g = squeeze(g_z)?;
        let mut g_cond: Option<Vec<S>> = None;
        for (b, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            g = b.actnorm.inverse_backward(&bc.actnorm_out, &g, g_logdet);
            g = b.invconv.inverse_backward(&bc.invconv_in, &g, g_logdet);
            let (gin, gc) = b.coupling.inverse_backward(&bc.coupling, &g, g_logdet);
            g = gin;
            if let Some(gc) = gc {
                match &mut g_cond {
                    Some(acc) => acc.iter_mut().zip(&gc).for_each(|(a, &v)| *a += v),
                    None => g_cond = Some(gc),
                }
            }
        }
        if let (Some(emb), Some(id), Some(gc)) = (&mut self.speaker, cache.speaker, g_cond) {
            let d = emb.dim();
            for (k, v) in gc.into_iter().enumerate() {
                emb.table.grad[id * d + k] += v;
            }
        }
        unsqueeze(&g)
    }

    /// Data-dependent actnorm initialisation from one batch of mels.
    pub fn initialize(&mut self, mels: &[&Matrix<S>], speakers: &[Option<usize>]) -> Result<()> {
        let conds = speakers
            .iter()
            .map(|&s| self.speaker_vector(s))
            .collect::<Result<Vec<_>>>()?;
        let mut hs = mels.iter().map(|m| squeeze(m)).collect::<Result<Vec<_>>>()?;
        let mut ctx = Ctx::eval();
        for bi in (0..self.blocks.len()).rev() {
            for (h, cond) in hs.iter_mut().zip(&conds) {
                let b = &self.blocks[bi];
                let (a, _, _) = b.coupling.inverse(h, cond.as_deref(), &mut ctx)?;
                *h = b.invconv.inverse(&a)?.0;
            }
            let block = &mut self.blocks[bi];
            if !block.actnorm.is_initialized() {
                block.actnorm.initialize_from(&hs.iter().collect::<Vec<_>>());
            }
            for h in hs.iter_mut() {
                *h = block.actnorm.inverse(h)?.0;
            }
        }
        Ok(())
    }

    /// Re-checks every 1x1 kernel after a parameter update.
    pub fn check_invertible(&self) -> Result<()> {
        for b in &self.blocks {
            b.invconv.check_invertible()?;
        }
        Ok(())
    }

    /// Adds Gaussian noise of the given scale to every parameter.
    pub fn perturb(&mut self, std: f64, rng: &mut impl Rng) {
        for (_, p) in self.named_params_mut() {
            let noise = Param::<S>::normal(&p.shape, std, rng);
            for (v, n) in p.value.iter_mut().zip(noise.value) {
                *v += n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(num_speakers: usize, data_init: bool) -> DecoderSpec {
        DecoderSpec {
            mel_channels: 4,
            blocks: 2,
            groups: 2,
            coupling: CouplingSpec {
                hidden: 6,
                layers: 2,
                kernel: 3,
                dilation_rate: 1,
                dropout: 0.0,
                cond_dim: 3,
            },
            num_speakers,
            data_init,
        }
    }

    #[test]
    fn identity_init_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dec = FlowDecoder::<f64>::new(tiny(0, false), &mut rng).unwrap();
        dec.set_identity_mixing();
        let x = Matrix::from_fn(4, 6, |r, c| (r * 6 + c) as f64);
        let (z, ld, _) = dec.inverse(&x, None, &mut Ctx::eval()).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn round_trip_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = FlowDecoder::<f64>::new(tiny(2, false), &mut rng).unwrap();
        dec.perturb(0.1, &mut rng);
        let x = Matrix::from_fn(4, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        let (z, ld, _) = dec.inverse(&x, Some(1), &mut Ctx::eval()).unwrap();
        assert_eq!(z.cols(), 6);
        let back = dec.forward(&z, Some(1)).unwrap();
        assert!(back.max_abs_diff(&x.truncate_cols(6)) < 1e-10);
        let (_, lds) = dec.forward_with_logdet(&z, Some(1)).unwrap();
        let total: f64 = lds.iter().sum();
        assert!((total + ld).abs() < 1e-10);
        assert_eq!(dec.forward_passes(), 1);
    }

    #[test]
    fn speaker_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = FlowDecoder::<f64>::new(tiny(2, false), &mut rng).unwrap();
        let z = Matrix::zeros(4, 4);
        assert!(matches!(dec.forward(&z, Some(2)), Err(GlowError::UnknownSpeaker { id: 2, count: 2 })));
        assert!(dec.forward(&z, None).is_err());
        assert!(dec.forward(&Matrix::zeros(4, 5), Some(0)).is_err());
    }

    #[test]
    fn data_init_normalises_latent_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = FlowDecoder::<f64>::new(tiny(0, true), &mut rng).unwrap();
        assert!(!dec.is_initialized());
        let x = Matrix::from_fn(4, 10, |r, c| 5.0 + 3.0 * ((r * 10 + c) as f64).sin());
        assert!(matches!(dec.inverse(&x, None, &mut Ctx::eval()), Err(GlowError::NotInitialized)));
        dec.initialize(&[&x], &[None]).unwrap();
        assert!(dec.is_initialized());
        let (z, _, _) = dec.inverse(&x, None, &mut Ctx::eval()).unwrap();
        let h = squeeze(&z).unwrap();
        for r in 0..8 {
            let m: f64 = h.row(r).iter().sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-9, "channel {r} mean {m}");
        }
    }
}
