//! Layers with explicit forward and backward passes.
//!
//! Layers are stateless with respect to activations: `forward` returns
//! whatever the caller must keep, and `backward` takes it back, accumulating
//! parameter gradients into [`Param::grad`].

mod attention;
mod conv;
mod norm;

pub use attention::{AttentionCache, RelativeSelfAttention};
pub use conv::Conv1d;
pub use norm::{LayerNorm, LayerNormCache, LAYER_NORM_EPS};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Param<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![S::zero(); n],
            grad: vec![S::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = S::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            let e: f64 = StandardNormal.sample(rng);
            *v = S::of(e * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

/// Named parameter traversal. Names are dotted paths, stable across runs.
pub trait Module<S: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>);

    fn named_params(&self) -> Vec<(String, &Param<S>)> {
        let mut v = Vec::new();
        self.params("", &mut v);
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<S>)> {
        let mut v = Vec::new();
        self.params_mut("", &mut v);
        v
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All parameter values concatenated in traversal order.
    fn flat_values(&self) -> Vec<S> {
        self.named_params().into_iter().flat_map(|(_, p)| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<S> {
        self.named_params().into_iter().flat_map(|(_, p)| p.grad.iter().copied()).collect()
    }

    /// Inverse of [`flat_values`](Module::flat_values).
    fn set_flat_values(&mut self, values: &[S]) {
        let mut it = values.iter();
        for (_, p) in self.named_params_mut() {
            for v in &mut p.value {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`Module`] from lists of parameter fields, nested module
/// fields, `Vec` of modules and `Option` of modules.
macro_rules! impl_module {
    ($ty:ident { params: [$($p:ident),*], modules: [$($m:ident),*], lists: [$($l:ident),*], options: [$($o:ident),*] }) => {
        impl<S: $crate::scalar::Scalar> $crate::nn::Module<S> for $ty<S> {
            #[allow(unused_variables)]
            fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::nn::Param<S>)>) {
                $( out.push(($crate::nn::join(prefix, stringify!($p)), &self.$p)); )*
                $( self.$m.params(&$crate::nn::join(prefix, stringify!($m)), out); )*
                $( for (i, x) in self.$l.iter().enumerate() {
                    x.params(&$crate::nn::join(&$crate::nn::join(prefix, stringify!($l)), &i.to_string()), out);
                } )*
                $( if let Some(x) = &self.$o { x.params(&$crate::nn::join(prefix, stringify!($o)), out); } )*
            }

            #[allow(unused_variables)]
            fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::nn::Param<S>)>) {
                $( out.push(($crate::nn::join(prefix, stringify!($p)), &mut self.$p)); )*
                $( self.$m.params_mut(&$crate::nn::join(prefix, stringify!($m)), out); )*
                $( for (i, x) in self.$l.iter_mut().enumerate() {
                    x.params_mut(&$crate::nn::join(&$crate::nn::join(prefix, stringify!($l)), &i.to_string()), out);
                } )*
                $( if let Some(x) = &mut self.$o { x.params_mut(&$crate::nn::join(prefix, stringify!($o)), out); } )*
            }
        }
    };
}
pub(crate) use impl_module;

/// Per-sample forward context. Dropout is active only when an RNG is present.
#[derive(Debug, Clone)]
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout in place; returns the scaled keep-mask for backward.
    pub fn dropout<S: Scalar>(&mut self, x: &mut Matrix<S>, p: f64) -> Option<Vec<S>> {
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..x.as_slice().len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        for (v, &m) in x.as_mut_slice().iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

pub fn apply_mask_grad<S: Scalar>(g: &mut Matrix<S>, mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &k) in g.as_mut_slice().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub fn relu<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    x.map(|v| v.max(S::zero()))
}

/// `g` masked by the sign of the (post-activation) output.
pub fn relu_backward<S: Scalar>(y: &Matrix<S>, g: &Matrix<S>) -> Matrix<S> {
    let mut out = g.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if v <= S::zero() {
            *o = S::zero();
        }
    }
    out
}

/// Token embedding table, vocab x dim.
#[derive(Debug, Clone)]
pub struct Embedding<S> {
    pub table: Param<S>,
    dim: usize,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Param::normal(&[vocab, dim], (dim as f64).powf(-0.5), rng),
            dim,
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// dim x len
    pub fn forward(&self, ids: &[usize]) -> Matrix<S> {
        Matrix::from_fn(self.dim, ids.len(), |c, t| {
            self.table.value[ids[t] * self.dim + c]
        })
    }

    pub fn backward(&mut self, ids: &[usize], g: &Matrix<S>) {
        for (t, &id) in ids.iter().enumerate() {
            for c in 0..self.dim {
                self.table.grad[id * self.dim + c] += g.get(c, t);
            }
        }
    }
}

impl_module!(Embedding { params: [table], modules: [], lists: [], options: [] });

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_ctx_has_no_dropout() {
        let mut ctx = Ctx::eval();
        let mut x = Matrix::<f64>::filled(2, 3, 1.0);
        assert!(ctx.dropout(&mut x, 0.5).is_none());
        assert_eq!(x, Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(3));
        let mut x = Matrix::<f64>::filled(100, 100, 1.0);
        ctx.dropout(&mut x, 0.25).unwrap();
        let mean = x.sum() / 1e4;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn embedding_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedding::<f32>::new(5, 3, &mut rng);
        let names: Vec<_> = e.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["table"]);
        assert_eq!(e.num_params(), 15);
    }
}
