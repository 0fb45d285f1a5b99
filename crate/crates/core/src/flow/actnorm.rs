use crate::error::{GlowError, Result};
use crate::nn::{impl_module, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-channel affine `h' = exp(log_scale) * h + bias`.
#[derive(Debug, Clone)]
pub struct ActNorm<S> {
    pub log_scale: Param<S>,
    pub bias: Param<S>,
    initialized: bool,
}

impl<S: Scalar> ActNorm<S> {
    /// Identity parameters, waiting for data-dependent initialisation.
    pub fn new(channels: usize) -> Self {
        Self {
            log_scale: Param::zeros(&[channels]),
            bias: Param::zeros(&[channels]),
            initialized: false,
        }
    }

    /// Identity parameters, usable immediately.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    /// From explicit positive scales.
    pub fn from_scale_bias(scale: &[S], bias: &[S]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(GlowError::Dimension("actnorm scale/bias length".into()));
        }
        if scale.iter().any(|&s| !(s > S::zero())) {
            return Err(GlowError::Dimension("actnorm scales must be positive".into()));
        }
        let mut a = Self::identity(scale.len());
        a.log_scale.value = scale.iter().map(|s| s.ln()).collect();
        a.bias.value = bias.to_vec();
        Ok(a)
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Sets the parameters so the inverse maps `inputs` (data side) to zero
    /// mean and unit variance per channel.
    pub fn initialize_from(&mut self, inputs: &[&Matrix<S>]) {
        let c = self.channels();
        let n: usize = inputs.iter().map(|m| m.cols()).sum();
        if n == 0 {
            return;
        }
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for m in inputs {
                for &v in m.row(ch) {
                    let v = v.as_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt().max(1e-3);
            self.bias.value[ch] = S::of(mean);
            self.log_scale.value[ch] = S::of(std.ln());
        }
        self.initialized = true;
    }

    fn check(&self, h: &Matrix<S>) -> Result<()> {
        if !self.initialized {
            return Err(GlowError::NotInitialized);
        }
        if h.rows() != self.channels() {
            return Err(GlowError::Dimension(format!(
                "actnorm expects {} channels, got {}",
                self.channels(),
                h.rows()
            )));
        }
        Ok(())
    }

    fn logdet_unit(&self) -> S {
        self.log_scale.value.iter().copied().sum()
    }

    pub fn forward(&self, h: &Matrix<S>) -> Result<(Matrix<S>, S)> {
        self.check(h)?;
        let mut out = h.clone();
        for c in 0..h.rows() {
            let s = self.log_scale.value[c].exp();
            let b = self.bias.value[c];
            out.row_mut(c).iter_mut().for_each(|v| *v = s * *v + b);
        }
        Ok((out, S::of(h.cols() as f64) * self.logdet_unit()))
    }

    pub fn inverse(&self, h: &Matrix<S>) -> Result<(Matrix<S>, S)> {
        self.check(h)?;
        let mut out = h.clone();
        for c in 0..h.rows() {
            let s = (-self.log_scale.value[c]).exp();
            let b = self.bias.value[c];
            out.row_mut(c).iter_mut().for_each(|v| *v = (*v - b) * s);
        }
        Ok((out, -S::of(h.cols() as f64) * self.logdet_unit()))
    }

    /// `output` is what [`inverse`](Self::inverse) returned; `g_logdet` is
    /// the loss weight on its log-determinant.
    pub fn inverse_backward(&mut self, output: &Matrix<S>, g: &Matrix<S>, g_logdet: S) -> Matrix<S> {
        let t = S::of(g.cols() as f64);
        let mut gx = g.clone();
        for c in 0..g.rows() {
            let e = (-self.log_scale.value[c]).exp();
            let mut gb = S::zero();
            let mut gs = S::zero();
            for ((gx_v, &gv), &hv) in gx.row_mut(c).iter_mut().zip(g.row(c)).zip(output.row(c)) {
                *gx_v = gv * e;
                gb += gv;
                gs += gv * hv;
            }
            self.bias.grad[c] -= gb * e;
            self.log_scale.grad[c] += -gs - g_logdet * t;
        }
        gx
    }
}

impl_module!(ActNorm { params: [log_scale, bias], modules: [], lists: [], options: [] });
