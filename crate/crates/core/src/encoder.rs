//! Text encoder and duration predictor.
//!
//! The encoder maps token ids to hidden states `h` (H x T_text) and prior
//! means `mu` (D x T_text). It runs an embedding scaled by `sqrt(H)`, a
//! residual convolutional pre-net, pre-norm transformer blocks with relative
//! self-attention, a final layer norm and a 1x1 mean projection. The prior
//! scale is fixed at one.
//!
//! Every sequence carries a valid length; columns past it are kept at zero
//! so padded and unpadded inputs agree on the valid prefix.

use rand::Rng;

use crate::error::{GlowError, Result};
use crate::nn::{
    apply_mask_grad, impl_module, relu, relu_backward, AttentionCache, Conv1d, Ctx, Embedding,
    LayerNorm, LayerNormCache, RelativeSelfAttention, LAYER_NORM_EPS,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub vocab: usize,
    pub hidden: usize,
    pub prenet_layers: usize,
    pub prenet_hidden: usize,
    pub prenet_kernel: usize,
    pub prenet_dropout: f64,
    pub blocks: usize,
    pub heads: usize,
    pub window: usize,
    pub ffn_kernel: usize,
    pub ffn_filter: usize,
    pub dropout: f64,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationSpec {
    pub hidden: usize,
    pub kernel: usize,
    pub filter: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<S> {
    pub norm_attn: LayerNorm<S>,
    pub attn: RelativeSelfAttention<S>,
    pub norm_ffn: LayerNorm<S>,
    pub ffn_in: Conv1d<S>,
    pub ffn_out: Conv1d<S>,
}

impl_module!(EncoderBlock { params: [], modules: [norm_attn, attn, norm_ffn, ffn_in, ffn_out], lists: [], options: [] });

#[derive(Debug, Clone)]
pub struct PrenetLayer<S> {
    pub conv: Conv1d<S>,
    pub norm: LayerNorm<S>,
}

impl_module!(PrenetLayer { params: [], modules: [conv, norm], lists: [], options: [] });

#[derive(Debug, Clone)]
pub struct TextEncoder<S> {
    pub embedding: Embedding<S>,
    pub prenet: Vec<PrenetLayer<S>>,
    pub prenet_proj: Conv1d<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub final_norm: LayerNorm<S>,
    pub proj_mean: Conv1d<S>,
    spec: EncoderSpec,
}

impl_module!(TextEncoder { params: [], modules: [embedding, prenet_proj, final_norm, proj_mean], lists: [prenet, blocks], options: [] });

#[derive(Debug, Clone)]
struct PrenetCache<S> {
    input: Matrix<S>,
    norm: LayerNormCache<S>,
    act: Matrix<S>,
    drop: Option<Vec<S>>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    norm_attn: LayerNormCache<S>,
    attn: AttentionCache<S>,
    attn_drop: Option<Vec<S>>,
    norm_ffn: LayerNormCache<S>,
    ffn_input: Matrix<S>,
    ffn_act: Matrix<S>,
    ffn_hidden: Matrix<S>,
    ffn_act_drop: Option<Vec<S>>,
    ffn_out_drop: Option<Vec<S>>,
}

/// Activations kept for [`TextEncoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    ids: Vec<usize>,
    mask: Vec<S>,
    prenet: Vec<PrenetCache<S>>,
    prenet_out: Matrix<S>,
    blocks: Vec<BlockCache<S>>,
    final_norm: LayerNormCache<S>,
    hidden: Matrix<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<S> {
    /// H x T
    pub hidden: Matrix<S>,
    /// D x T
    pub mean: Matrix<S>,
    pub cache: EncoderCache<S>,
}

fn length_mask<S: Scalar>(len: usize, valid: usize) -> (Vec<S>, Vec<bool>) {
    let bools: Vec<bool> = (0..len).map(|t| t < valid).collect();
    (bools.iter().map(|&b| if b { S::one() } else { S::zero() }).collect(), bools)
}

fn masked<S: Scalar>(mut x: Matrix<S>, mask: &[S]) -> Matrix<S> {
    x.mask_cols(mask);
    x
}

impl<S: Scalar> TextEncoder<S> {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        if !spec.hidden.is_multiple_of(spec.heads) {
            return Err(GlowError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                spec.hidden, spec.heads
            )));
        }
        for k in [spec.prenet_kernel, spec.ffn_kernel] {
            if k % 2 == 0 {
                return Err(GlowError::Config(format!("kernel size {k} must be odd")));
            }
        }
        let h = spec.hidden;
        let prenet = (0..spec.prenet_layers)
            .map(|l| {
                let cin = if l == 0 { h } else { spec.prenet_hidden };
                PrenetLayer {
                    conv: Conv1d::new(cin, spec.prenet_hidden, spec.prenet_kernel, 1, rng),
                    norm: LayerNorm::new(spec.prenet_hidden),
                }
            })
            .collect();
        let proj_in = if spec.prenet_layers == 0 { h } else { spec.prenet_hidden };
        let blocks = (0..spec.blocks)
            .map(|_| EncoderBlock {
                norm_attn: LayerNorm::new(h),
                attn: RelativeSelfAttention::new(h, spec.heads, spec.window, rng),
                norm_ffn: LayerNorm::new(h),
                ffn_in: Conv1d::new(h, spec.ffn_filter, spec.ffn_kernel, 1, rng),
                ffn_out: Conv1d::new(spec.ffn_filter, h, spec.ffn_kernel, 1, rng),
            })
            .collect();
        Ok(Self {
            embedding: Embedding::new(spec.vocab, h, rng),
            prenet,
            prenet_proj: Conv1d::zeroed(proj_in, h, 1, 1),
            blocks,
            final_norm: LayerNorm::new(h),
            proj_mean: Conv1d::new(h, spec.out_dim, 1, 1, rng),
            spec,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_ids(&self, ids: &[usize], valid_len: usize) -> Result<()> {
        if ids.is_empty() || valid_len == 0 || valid_len > ids.len() {
            return Err(GlowError::Dimension(format!(
                "valid length {valid_len} for {} tokens",
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.spec.vocab) {
            return Err(GlowError::InvalidToken { id, vocab: self.spec.vocab });
        }
        Ok(())
    }

    /// Encodes `ids`, of which the first `valid_len` are real tokens.
    pub fn forward(&self, ids: &[usize], valid_len: usize, ctx: &mut Ctx) -> Result<EncoderOutput<S>> {
        self.check_ids(ids, valid_len)?;
        let (mask, valid) = length_mask::<S>(ids.len(), valid_len);
        let scale = S::of((self.spec.hidden as f64).sqrt());

        let mut x0 = self.embedding.forward(ids);
        x0.scale_in_place(scale);
        let x0 = masked(x0, &mask);

        let mut prenet = Vec::with_capacity(self.prenet.len());
        let mut cur = x0.clone();
        for layer in &self.prenet {
            let y = layer.conv.forward(&cur);
            let (n, norm) = layer.norm.forward(&y);
            let act = relu(&n);
            let mut out = act.clone();
            let drop = ctx.dropout(&mut out, self.spec.prenet_dropout);
            let out = masked(out, &mask);
            prenet.push(PrenetCache { input: cur, norm, act, drop });
            cur = out;
        }
        let mut h = masked(self.prenet_proj.forward(&cur), &mask);
        h.add_assign(&x0);
        let prenet_out = cur;

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (n1, norm_attn) = block.norm_attn.forward(&h);
            let (mut a, attn) = block.attn.forward(&masked(n1, &mask), &valid);
            let attn_drop = ctx.dropout(&mut a, self.spec.dropout);
            h.add_assign(&masked(a, &mask));

            let (n2, norm_ffn) = block.norm_ffn.forward(&h);
            let ffn_input = masked(n2, &mask);
            let ffn_act = relu(&block.ffn_in.forward(&ffn_input));
            let mut hid = ffn_act.clone();
            let ffn_act_drop = ctx.dropout(&mut hid, self.spec.dropout);
            let ffn_hidden = masked(hid, &mask);
            let mut f = block.ffn_out.forward(&ffn_hidden);
            let ffn_out_drop = ctx.dropout(&mut f, self.spec.dropout);
            h.add_assign(&masked(f, &mask));
            blocks.push(BlockCache {
                norm_attn,
                attn,
                attn_drop,
                norm_ffn,
                ffn_input,
                ffn_act,
                ffn_hidden,
                ffn_act_drop,
                ffn_out_drop,
            });
        }

        let (hf, final_norm) = self.final_norm.forward(&h);
        let hidden = masked(hf, &mask);
        let mean = masked(self.proj_mean.forward(&hidden), &mask);
        Ok(EncoderOutput {
            hidden: hidden.clone(),
            mean,
            cache: EncoderCache {
                ids: ids.to_vec(),
                mask,
                prenet,
                prenet_out,
                blocks,
                final_norm,
                hidden,
            },
        })
    }

    /// Back-propagates gradients w.r.t. the mean and, optionally, the hidden
    /// output. Parameter gradients accumulate.
    pub fn backward(&mut self, cache: &EncoderCache<S>, g_mean: &Matrix<S>, g_hidden: Option<&Matrix<S>>) {
        let mask = &cache.mask;
        let mut g_hid = self.proj_mean.backward(&cache.hidden, &masked(g_mean.clone(), mask));
        if let Some(g) = g_hidden {
            g_hid.add_assign(g);
        }
        let mut g_h = self.final_norm.backward(&cache.final_norm, &masked(g_hid, mask));

        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let mut g_f = masked(g_h.clone(), mask);
            apply_mask_grad(&mut g_f, &bc.ffn_out_drop);
            let mut g_hidden = masked(block.ffn_out.backward(&bc.ffn_hidden, &g_f), mask);
            apply_mask_grad(&mut g_hidden, &bc.ffn_act_drop);
            let g_pre = relu_backward(&bc.ffn_act, &g_hidden);
            let g_in = masked(block.ffn_in.backward(&bc.ffn_input, &g_pre), mask);
            g_h.add_assign(&block.norm_ffn.backward(&bc.norm_ffn, &g_in));

            let mut g_a = masked(g_h.clone(), mask);
            apply_mask_grad(&mut g_a, &bc.attn_drop);
            let g_n1 = masked(block.attn.backward(&bc.attn, &g_a), mask);
            g_h.add_assign(&block.norm_attn.backward(&bc.norm_attn, &g_n1));
        }

        let g_p = masked(g_h.clone(), mask);
        let mut g_cur = self.prenet_proj.backward(&cache.prenet_out, &g_p);
        for (layer, pc) in self.prenet.iter_mut().zip(&cache.prenet).rev() {
            let mut g = masked(g_cur, mask);
            apply_mask_grad(&mut g, &pc.drop);
            let g = relu_backward(&pc.act, &g);
            let g = layer.norm.backward(&pc.norm, &g);
            g_cur = layer.conv.backward(&pc.input, &g);
        }
        g_h.add_assign(&g_cur);
        let mut g_x0 = masked(g_h, mask);
        g_x0.scale_in_place(S::of((self.spec.hidden as f64).sqrt()));
        self.embedding.backward(&cache.ids, &g_x0);
    }

    /// Makes the encoder output exactly `means[:, id]` for every token id.
    ///
    /// Residual branches are zeroed and each token is embedded as a `+a, -a`
    /// pair on its own two channels, which the final layer norm leaves
    /// unchanged up to its epsilon. Needs `hidden >= 2 * vocab`.
    pub fn plant_token_means(&mut self, means: &Matrix<S>) -> Result<()> {
        let (h, vocab, d) = (self.spec.hidden, self.spec.vocab, self.spec.out_dim);
        if means.shape() != (d, vocab) || h < 2 * vocab {
            return Err(GlowError::Dimension(format!(
                "cannot plant {:?} means into hidden size {h}",
                means.shape()
            )));
        }
        let zero = |c: &mut Conv1d<S>| {
            c.weight.value.iter_mut().for_each(|v| *v = S::zero());
            c.bias.value.iter_mut().for_each(|v| *v = S::zero());
        };
        zero(&mut self.prenet_proj);
        for b in &mut self.blocks {
            zero(&mut b.attn.out);
            zero(&mut b.ffn_out);
        }
        let reset = |n: &mut LayerNorm<S>| {
            n.gamma.value.iter_mut().for_each(|v| *v = S::one());
            n.beta.value.iter_mut().for_each(|v| *v = S::zero());
        };
        reset(&mut self.final_norm);

        let a = (h as f64 / 2.0).sqrt();
        let emb = &mut self.embedding.table.value;
        emb.iter_mut().for_each(|v| *v = S::zero());
        let unscaled = a / (h as f64).sqrt();
        for k in 0..vocab {
            emb[k * h + 2 * k] = S::of(unscaled);
            emb[k * h + 2 * k + 1] = S::of(-unscaled);
        }
        let s = (1.0 + LAYER_NORM_EPS).sqrt();
        zero(&mut self.proj_mean);
        let w = &mut self.proj_mean.weight.value;
        for r in 0..d {
            for k in 0..vocab {
                let v = means.get(r, k).as_f64() * s / (2.0 * a);
                w[r * h + 2 * k] = S::of(v);
                w[r * h + 2 * k + 1] = S::of(-v);
            }
        }
        Ok(())
    }
}

/// Predicts log durations from (detached) encoder hidden states.
#[derive(Debug, Clone)]
pub struct DurationPredictor<S> {
    pub conv1: Conv1d<S>,
    pub norm1: LayerNorm<S>,
    pub conv2: Conv1d<S>,
    pub norm2: LayerNorm<S>,
    pub proj: Conv1d<S>,
    spec: DurationSpec,
}

impl_module!(DurationPredictor { params: [], modules: [conv1, norm1, conv2, norm2, proj], lists: [], options: [] });

#[derive(Debug, Clone)]
pub struct DurationCache<S> {
    mask: Vec<S>,
    input: Matrix<S>,
    act1: Matrix<S>,
    norm1: LayerNormCache<S>,
    drop1: Option<Vec<S>>,
    mid: Matrix<S>,
    act2: Matrix<S>,
    norm2: LayerNormCache<S>,
    drop2: Option<Vec<S>>,
    last: Matrix<S>,
}

impl<S: Scalar> DurationPredictor<S> {
    pub fn new(spec: DurationSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) {
            return Err(GlowError::Config(format!("kernel size {} must be odd", spec.kernel)));
        }
        Ok(Self {
            conv1: Conv1d::new(spec.hidden, spec.filter, spec.kernel, 1, rng),
            norm1: LayerNorm::new(spec.filter),
            conv2: Conv1d::new(spec.filter, spec.filter, spec.kernel, 1, rng),
            norm2: LayerNorm::new(spec.filter),
            proj: Conv1d::zeroed(spec.filter, 1, 1, 1),
            spec,
        })
    }

    pub fn spec(&self) -> &DurationSpec {
        &self.spec
    }

    /// Log durations for every column of `hidden`; entries past `valid_len`
    /// are zero.
    pub fn forward(&self, hidden: &Matrix<S>, valid_len: usize, ctx: &mut Ctx) -> Result<(Vec<S>, DurationCache<S>)> {
        if hidden.rows() != self.spec.hidden || valid_len == 0 || valid_len > hidden.cols() {
            return Err(GlowError::Dimension(format!(
                "duration predictor got {:?} with valid length {valid_len}",
                hidden.shape()
            )));
        }
        let (mask, _) = length_mask::<S>(hidden.cols(), valid_len);
        let input = masked(hidden.clone(), &mask);
        let act1 = relu(&self.conv1.forward(&input));
        let (n1, norm1) = self.norm1.forward(&act1);
        let mut mid = n1;
        let drop1 = ctx.dropout(&mut mid, self.spec.dropout);
        let mid = masked(mid, &mask);
        let act2 = relu(&self.conv2.forward(&mid));
        let (n2, norm2) = self.norm2.forward(&act2);
        let mut last = n2;
        let drop2 = ctx.dropout(&mut last, self.spec.dropout);
        let last = masked(last, &mask);
        let out = masked(self.proj.forward(&last), &mask);
        let logd = out.row(0).to_vec();
        Ok((
            logd,
            DurationCache { mask, input, act1, norm1, drop1, mid, act2, norm2, drop2, last },
        ))
    }

    /// Parameter gradients only; nothing flows back into the encoder.
    pub fn backward(&mut self, cache: &DurationCache<S>, g_logd: &[S]) {
        let t = cache.mask.len();
        let mut g = Matrix::from_vec(1, t, g_logd.to_vec()).expect("one gradient per token");
        g.mask_cols(&cache.mask);
        let mut g_last = masked(self.proj.backward(&cache.last, &g), &cache.mask);
        apply_mask_grad(&mut g_last, &cache.drop2);
        let g_act2 = self.norm2.backward(&cache.norm2, &g_last);
        let g_pre2 = relu_backward(&cache.act2, &g_act2);
        let mut g_mid = masked(self.conv2.backward(&cache.mid, &g_pre2), &cache.mask);
        apply_mask_grad(&mut g_mid, &cache.drop1);
        let g_act1 = self.norm1.backward(&cache.norm1, &g_mid);
        let g_pre1 = relu_backward(&cache.act1, &g_act1);
        self.conv1.backward(&cache.input, &g_pre1);
    }
}
