//! Affine coupling with a gated convolutional network.
//!
//! The first channel half passes through unchanged and drives a stack of
//! dilated convolutions with tanh/sigmoid gates, residual and skip paths.
//! A zero-initialised projection turns the skip sum into a shift and a
//! log-scale for the second half. An optional speaker embedding is projected
//! to a per-layer bias on the gate pre-activations, shared by all time steps.

use rand::Rng;

use crate::error::{GlowError, Result};
use crate::nn::{apply_mask_grad, impl_module, Conv1d, Ctx};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingSpec {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilation_rate: usize,
    pub dropout: f64,
    /// 0 disables speaker conditioning.
    pub cond_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AffineCoupling<S> {
    pub start: Conv1d<S>,
    pub in_layers: Vec<Conv1d<S>>,
    pub res_skip: Vec<Conv1d<S>>,
    pub end: Conv1d<S>,
    pub cond: Option<Conv1d<S>>,
    channels: usize,
    spec: CouplingSpec,
}

#[derive(Debug, Clone)]
struct NetCache<S> {
    input: Matrix<S>,
    layer_in: Vec<Matrix<S>>,
    tanh: Vec<Matrix<S>>,
    sig: Vec<Matrix<S>>,
    acts: Vec<Matrix<S>>,
    drop: Vec<Option<Vec<S>>>,
    skip: Matrix<S>,
    cond_in: Option<Matrix<S>>,
}

#[derive(Debug, Clone)]
pub struct CouplingCache<S> {
    net: NetCache<S>,
    log_scale: Matrix<S>,
    /// transformed half after the inverse
    out_b: Matrix<S>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> AffineCoupling<S> {
    pub fn new(channels: usize, spec: CouplingSpec, rng: &mut impl Rng) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(GlowError::Dimension(format!("coupling needs even channels, got {channels}")));
        }
        let half = channels / 2;
        let h = spec.hidden;
        let in_layers = (0..spec.layers)
            .map(|i| Conv1d::new(h, 2 * h, spec.kernel, spec.dilation_rate.max(1).pow(i as u32), rng))
            .collect();
        let res_skip = (0..spec.layers)
            .map(|i| {
                let out = if i + 1 < spec.layers { 2 * h } else { h };
                Conv1d::new(h, out, 1, 1, rng)
            })
            .collect();
        let cond = (spec.cond_dim > 0).then(|| Conv1d::new(spec.cond_dim, 2 * h * spec.layers, 1, 1, rng));
        Ok(Self {
            start: Conv1d::new(half, h, 1, 1, rng),
            in_layers,
            res_skip,
            end: Conv1d::zeroed(h, channels, 1, 1),
            cond,
            channels,
            spec,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn net(&self, ha: &Matrix<S>, cond: Option<&[S]>, ctx: &mut Ctx) -> Result<(Matrix<S>, NetCache<S>)> {
        let h = self.spec.hidden;
        let t = ha.cols();
        let cond_in = match (&self.cond, cond) {
            (Some(_), Some(c)) => {
                if c.len() != self.spec.cond_dim {
                    return Err(GlowError::Dimension(format!(
                        "conditioning vector of {} for dim {}",
                        c.len(),
                        self.spec.cond_dim
                    )));
                }
                Some(Matrix::from_vec(c.len(), 1, c.to_vec())?)
            }
            (None, None) => None,
            (Some(_), None) => return Err(GlowError::Dimension("speaker conditioning required".into())),
            (None, Some(_)) => return Err(GlowError::Dimension("model has no speaker conditioning".into())),
        };
        let cond_bias = match (&self.cond, &cond_in) {
            (Some(layer), Some(ci)) => Some(layer.forward(ci)),
            _ => None,
        };
        let mut x = self.start.forward(ha);
        let mut skip = Matrix::zeros(h, t);
        let mut cache = NetCache {
            input: ha.clone(),
            layer_in: Vec::new(),
            tanh: Vec::new(),
            sig: Vec::new(),
            acts: Vec::new(),
            drop: Vec::new(),
            skip: Matrix::zeros(h, t),
            cond_in,
        };
        for i in 0..self.spec.layers {
            let mut a = self.in_layers[i].forward(&x);
            if let Some(cb) = &cond_bias {
                for r in 0..2 * h {
                    let b = cb.get(i * 2 * h + r, 0);
                    a.row_mut(r).iter_mut().for_each(|v| *v += b);
                }
            }
            let th = a.row_range(0, h).map(|v| v.tanh());
            let sg = a.row_range(h, 2 * h).map(sigmoid);
            let mut acts = Matrix::from_fn(h, t, |r, c| th.get(r, c) * sg.get(r, c));
            let drop = ctx.dropout(&mut acts, self.spec.dropout);
            let rs = self.res_skip[i].forward(&acts);
            cache.layer_in.push(x.clone());
            if i + 1 < self.spec.layers {
                x.add_assign(&rs.row_range(0, h));
                skip.add_assign(&rs.row_range(h, 2 * h));
            } else {
                skip.add_assign(&rs);
            }
            cache.tanh.push(th);
            cache.sig.push(sg);
            cache.acts.push(acts);
            cache.drop.push(drop);
        }
        let out = self.end.forward(&skip);
        cache.skip = skip;
        Ok((out, cache))
    }

    /// Returns the gradient w.r.t. the net input and the conditioning vector.
    fn net_backward(&mut self, cache: &NetCache<S>, g_out: &Matrix<S>) -> (Matrix<S>, Option<Vec<S>>) {
        let h = self.spec.hidden;
        let t = g_out.cols();
        let g_skip = self.end.backward(&cache.skip, g_out);
        let mut g_x = Matrix::zeros(h, t);
        let mut g_cond = self.cond.as_ref().map(|_| Matrix::zeros(2 * h * self.spec.layers, 1));
        for i in (0..self.spec.layers).rev() {
            let g_rs = if i + 1 < self.spec.layers {
                Matrix::vstack(&[&g_x, &g_skip])
            } else {
                g_skip.clone()
            };
            let mut g_acts = self.res_skip[i].backward(&cache.acts[i], &g_rs);
            apply_mask_grad(&mut g_acts, &cache.drop[i]);
            let (th, sg) = (&cache.tanh[i], &cache.sig[i]);
            let mut g_a = Matrix::zeros(2 * h, t);
            for r in 0..h {
                for c in 0..t {
                    let (tv, sv, gv) = (th.get(r, c), sg.get(r, c), g_acts.get(r, c));
                    g_a.set(r, c, gv * sv * (S::one() - tv * tv));
                    g_a.set(h + r, c, gv * tv * sv * (S::one() - sv));
                }
            }
            if let Some(gc) = &mut g_cond {
                for r in 0..2 * h {
                    let s: S = g_a.row(r).iter().copied().sum();
                    gc.set(i * 2 * h + r, 0, s);
                }
            }
            let g_in = self.in_layers[i].backward(&cache.layer_in[i], &g_a);
            g_x.add_assign(&g_in);
        }
        let g_ha = self.start.backward(&cache.input, &g_x);
        let g_cond_vec = match (&mut self.cond, g_cond, &cache.cond_in) {
            (Some(layer), Some(gc), Some(ci)) => Some(layer.backward(ci, &gc).into_vec()),
            _ => None,
        };
        (g_ha, g_cond_vec)
    }

    fn split(&self, h: &Matrix<S>) -> Result<(Matrix<S>, Matrix<S>)> {
        if h.rows() != self.channels {
            return Err(GlowError::Dimension(format!(
                "coupling expects {} channels, got {}",
                self.channels,
                h.rows()
            )));
        }
        let half = self.channels / 2;
        Ok((h.row_range(0, half), h.row_range(half, self.channels)))
    }

    /// Latent to mel: `h_b' = exp(log_s) * h_b + t`.
    pub fn forward(&self, h: &Matrix<S>, cond: Option<&[S]>) -> Result<(Matrix<S>, S)> {
        let (ha, hb) = self.split(h)?;
        let half = self.channels / 2;
        let (out, _) = self.net(&ha, cond, &mut Ctx::eval())?;
        let mut logdet = S::zero();
        let mut yb = hb.clone();
        for r in 0..half {
            for c in 0..h.cols() {
                let ls = out.get(half + r, c);
                logdet += ls;
                yb.set(r, c, ls.exp() * hb.get(r, c) + out.get(r, c));
            }
        }
        Ok((Matrix::vstack(&[&ha, &yb]), logdet))
    }

    /// Mel to latent: `h_b = (h_b' - t) * exp(-log_s)`.
    pub fn inverse(&self, h: &Matrix<S>, cond: Option<&[S]>, ctx: &mut Ctx) -> Result<(Matrix<S>, S, CouplingCache<S>)> {
        let (ha, hb) = self.split(h)?;
        let half = self.channels / 2;
        let (out, net) = self.net(&ha, cond, ctx)?;
        let mut logdet = S::zero();
        let mut xb = hb.clone();
        for r in 0..half {
            for c in 0..h.cols() {
                let ls = out.get(half + r, c);
                logdet -= ls;
                xb.set(r, c, (hb.get(r, c) - out.get(r, c)) * (-ls).exp());
            }
        }
        let log_scale = out.row_range(half, self.channels);
        let y = Matrix::vstack(&[&ha, &xb]);
        Ok((
            y,
            logdet,
            CouplingCache {
                net,
                log_scale,
                out_b: xb,
            },
        ))
    }

    pub fn inverse_backward(
        &mut self,
        cache: &CouplingCache<S>,
        g: &Matrix<S>,
        g_logdet: S,
    ) -> (Matrix<S>, Option<Vec<S>>) {
        let half = self.channels / 2;
        let t = g.cols();
        let mut g_in_b = Matrix::zeros(half, t);
        let mut g_net = Matrix::zeros(self.channels, t);
        for r in 0..half {
            for c in 0..t {
                let e = (-cache.log_scale.get(r, c)).exp();
                let gb = g.get(half + r, c);
                g_in_b.set(r, c, gb * e);
                g_net.set(r, c, -gb * e);
                g_net.set(half + r, c, -gb * cache.out_b.get(r, c) - g_logdet);
            }
        }
        let (mut g_a, g_cond) = self.net_backward(&cache.net, &g_net);
        g_a.add_assign(&g.row_range(0, half));
        (Matrix::vstack(&[&g_a, &g_in_b]), g_cond)
    }
}

impl_module!(AffineCoupling { params: [], modules: [start, end], lists: [in_layers, res_skip], options: [cond] });
