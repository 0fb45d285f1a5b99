//! Multi-head self-attention with learned relative-position keys.
//!
//! `logit(i, j) = q_i . (k_j + r[clip(j - i, -w, w)]) / sqrt(d_head)`; the
//! relative table is shared across heads. Positions whose key is masked out
//! never receive attention weight.

use rand::Rng;

use super::{impl_module, Conv1d, Param};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct RelativeSelfAttention<S> {
    pub query: Conv1d<S>,
    pub key: Conv1d<S>,
    pub value: Conv1d<S>,
    pub out: Conv1d<S>,
    /// (2 * window + 1) x d_head
    pub rel_key: Param<S>,
    heads: usize,
    window: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    x: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// per head, T x T row-major
    probs: Vec<Vec<S>>,
    attended: Matrix<S>,
    valid: Vec<bool>,
}

impl<S: Scalar> RelativeSelfAttention<S> {
    pub fn new(channels: usize, heads: usize, window: usize, rng: &mut impl Rng) -> Self {
        assert!(channels.is_multiple_of(heads), "channels must split evenly over heads");
        let d_head = channels / heads;
        Self {
            query: Conv1d::new(channels, channels, 1, 1, rng),
            key: Conv1d::new(channels, channels, 1, 1, rng),
            value: Conv1d::new(channels, channels, 1, 1, rng),
            out: Conv1d::new(channels, channels, 1, 1, rng),
            rel_key: Param::normal(&[2 * window + 1, d_head], (d_head as f64).powf(-0.5), rng),
            heads,
            window,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn d_head(&self) -> usize {
        self.query.out_channels() / self.heads
    }

    #[inline]
    fn rel_index(&self, i: usize, j: usize) -> usize {
        let w = self.window as isize;
        ((j as isize - i as isize).clamp(-w, w) + w) as usize
    }

    /// Core attention on already-projected q, k, v (channels x T).
    fn attend(&self, q: &Matrix<S>, k: &Matrix<S>, v: &Matrix<S>, valid: &[bool]) -> (Matrix<S>, Vec<Vec<S>>) {
        let t = q.cols();
        let dh = self.d_head();
        let scale = S::of((dh as f64).powf(-0.5));
        let rel = &self.rel_key.value;
        let mut attended = Matrix::zeros(q.rows(), t);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let base = h * dh;
            let mut p = vec![S::zero(); t * t];
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = S::neg_infinity();
                for j in 0..t {
                    if !valid[j] {
                        continue;
                    }
                    let r = self.rel_index(i, j) * dh;
                    let mut acc = S::zero();
                    for c in 0..dh {
                        acc += q.get(base + c, i) * (k.get(base + c, j) + rel[r + c]);
                    }
                    row[j] = acc * scale;
                    max = max.max(row[j]);
                }
                let mut denom = S::zero();
                for j in 0..t {
                    if valid[j] {
                        row[j] = (row[j] - max).exp();
                        denom += row[j];
                    }
                }
                if denom > S::zero() {
                    row.iter_mut().for_each(|x| *x /= denom);
                }
                for c in 0..dh {
                    let mut acc = S::zero();
                    for j in 0..t {
                        acc += row[j] * v.get(base + c, j);
                    }
                    attended.set(base + c, i, acc);
                }
            }
            probs.push(p);
        }
        (attended, probs)
    }

    /// Raw attention of pre-projected queries, keys and values.
    pub fn attend_projected(&self, q: &Matrix<S>, k: &Matrix<S>, v: &Matrix<S>, valid: &[bool]) -> Matrix<S> {
        self.attend(q, k, v, valid).0
    }

    pub fn forward(&self, x: &Matrix<S>, valid: &[bool]) -> (Matrix<S>, AttentionCache<S>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let (attended, probs) = self.attend(&q, &k, &v, valid);
        let y = self.out.forward(&attended);
        (
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                attended,
                valid: valid.to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<S>, gy: &Matrix<S>) -> Matrix<S> {
        let g_att = self.out.backward(&cache.attended, gy);
        let (ch, t) = cache.q.shape();
        let dh = self.d_head();
        let scale = S::of((dh as f64).powf(-0.5));
        let mut gq = Matrix::zeros(ch, t);
        let mut gk = Matrix::zeros(ch, t);
        let mut gv = Matrix::zeros(ch, t);
        let mut gp = vec![S::zero(); t];
        for h in 0..self.heads {
            let base = h * dh;
            let p = &cache.probs[h];
            for i in 0..t {
                let row = &p[i * t..(i + 1) * t];
                let mut dot = S::zero();
                for j in 0..t {
                    if !cache.valid[j] {
                        gp[j] = S::zero();
                        continue;
                    }
                    let mut acc = S::zero();
                    for c in 0..dh {
                        let go = g_att.get(base + c, i);
                        acc += go * cache.v.get(base + c, j);
                        let cur = gv.get(base + c, j);
                        gv.set(base + c, j, cur + row[j] * go);
                    }
                    gp[j] = acc;
                    dot += row[j] * acc;
                }
                for j in 0..t {
                    if !cache.valid[j] {
                        continue;
                    }
                    let gl = row[j] * (gp[j] - dot) * scale;
                    if gl == S::zero() {
                        continue;
                    }
                    let r = self.rel_index(i, j) * dh;
                    for c in 0..dh {
                        let qv = cache.q.get(base + c, i);
                        let kv = cache.k.get(base + c, j) + self.rel_key.value[r + c];
                        let cur = gq.get(base + c, i);
                        gq.set(base + c, i, cur + gl * kv);
                        let cur = gk.get(base + c, j);
                        gk.set(base + c, j, cur + gl * qv);
                        self.rel_key.grad[r + c] += gl * qv;
                    }
                }
            }
        }
        let mut gx = self.query.backward(&cache.x, &gq);
        gx.add_assign(&self.key.backward(&cache.x, &gk));
        gx.add_assign(&self.value.backward(&cache.x, &gv));
        gx
    }
}

impl_module!(RelativeSelfAttention { params: [rel_key], modules: [query, key, value, out], lists: [], options: [] });

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_position_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = RelativeSelfAttention::<f64>::new(4, 2, 4, &mut rng);
        let q = Matrix::from_fn(4, 1, |r, _| r as f64);
        let v = Matrix::from_fn(4, 1, |r, _| 1.0 - r as f64);
        let out = attn.attend_projected(&q, &q, &v, &[true]);
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_relative_table_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut attn = RelativeSelfAttention::<f64>::new(4, 1, 2, &mut rng);
        attn.rel_key.value.iter_mut().for_each(|v| *v = 0.0);
        let q = Matrix::from_fn(4, 3, |r, c| ((r + 3 * c) as f64).sin());
        let k = Matrix::from_fn(4, 3, |r, c| ((2 * r + c) as f64).cos());
        let v = Matrix::from_fn(4, 3, |r, c| (r * c) as f64);
        let out = attn.attend_projected(&q, &k, &v, &[true; 3]);
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.get(c, i) * k.get(c, j)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                let e: f64 = (0..3).map(|j| logits[j].exp() / z * v.get(c, j)).sum();
                assert!((e - out.get(c, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut attn = RelativeSelfAttention::<f64>::new(4, 2, 1, &mut rng);
        let x = Matrix::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.9).sin());
        let valid = [true, true, true, true, false];
        let gy = Matrix::from_fn(4, 5, |r, c| ((r + 2 * c) as f64 * 0.4).cos());
        let f = |a: &RelativeSelfAttention<f64>, x: &Matrix<f64>| -> f64 {
            let (y, _) = a.forward(x, &valid);
            y.as_slice().iter().zip(gy.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attn.forward(&x, &valid);
        attn.zero_grad();
        let gx = attn.backward(&cache, &gy);
        let eps = 1e-6;
        for idx in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += eps;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= eps;
            let fd = (f(&attn, &xp) - f(&attn, &xm)) / (2.0 * eps);
            assert!((fd - gx.as_slice()[idx]).abs() < 1e-7);
        }
        let analytic: Vec<f64> = attn
            .named_params()
            .iter()
            .flat_map(|(_, p)| p.grad.clone())
            .collect();
        let mut flat_idx = 0;
        let names: Vec<String> = attn.named_params().into_iter().map(|(n, _)| n).collect();
        for name in &names {
            let len = attn.named_params().iter().find(|(n, _)| n == name).unwrap().1.len();
            for k in 0..len {
                let mut a2 = attn.clone();
                let bump = |a: &mut RelativeSelfAttention<f64>, d: f64| {
                    for (n, p) in a.named_params_mut() {
                        if &n == name {
                            p.value[k] += d;
                        }
                    }
                };
                bump(&mut a2, eps);
                let up = f(&a2, &x);
                bump(&mut a2, -2.0 * eps);
                let fd = (up - f(&a2, &x)) / (2.0 * eps);
                assert!((fd - analytic[flat_idx]).abs() < 1e-7, "{name}[{k}]");
                flat_idx += 1;
            }
        }
    }
}
