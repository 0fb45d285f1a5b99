//! Row-major 2-D container. Feature maps are stored channels x time.

use crate::error::{GlowError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GlowError::Dimension(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<S> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, k: S) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Keeps the first `cols` columns.
    pub fn truncate_cols(&self, cols: usize) -> Self {
        let cols = cols.min(self.cols);
        Self::from_fn(self.rows, cols, |r, c| self.get(r, c))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self { rows, cols, data }
    }

    /// Multiplies every column `t` by `mask[t]`.
    pub fn mask_cols(&mut self, mask: &[S]) {
        debug_assert_eq!(mask.len(), self.cols);
        for r in 0..self.rows {
            for (v, &m) in self.row_mut(r).iter_mut().zip(mask) {
                *v *= m;
            }
        }
    }

    /// Plain `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == S::zero() {
                    continue;
                }
                let src = rhs.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

/// LU factorisation with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu<S> {
    n: usize,
    lu: Vec<S>,
    perm: Vec<usize>,
    sign: S,
    singular: bool,
}

impl<S: Scalar> Lu<S> {
    pub fn new(m: &Matrix<S>) -> Self {
        assert_eq!(m.rows(), m.cols(), "LU of non-square matrix");
        let n = m.rows();
        let mut lu = m.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = S::one();
        let mut singular = false;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == S::zero() {
                singular = true;
                continue;
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    let u = lu[k * n + c];
                    lu[r * n + c] -= f * u;
                }
            }
        }
        Self {
            n,
            lu,
            perm,
            sign,
            singular,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// (log|det|, sign of det). Singular matrices report -inf.
    pub fn log_abs_det(&self) -> (S, S) {
        if self.singular {
            return (S::neg_infinity(), S::zero());
        }
        let mut acc = S::zero();
        let mut sign = self.sign;
        for k in 0..self.n {
            let d = self.lu[k * self.n + k];
            if d < S::zero() {
                sign = -sign;
            }
            acc += d.abs().ln();
        }
        (acc, sign)
    }

    pub fn solve(&self, b: &[S]) -> Vec<S> {
        let n = self.n;
        let mut x: Vec<S> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                x[i] = x[i] - l * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                x[i] = x[i] - u * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Matrix<S> {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![S::zero(); n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = S::zero());
            e[c] = S::one();
            let col = self.solve(&e);
            for r in 0..n {
                inv.set(r, c, col[r]);
            }
        }
        inv
    }
}
