//! Pooling, similarity, softmax and loss primitives with their derivatives.

use serde::{Deserialize, Serialize};

use super::tensor::{dot, norm, Matrix, Scalar};
use crate::error::{Error, Result};

/// Per-position vectors with a validity flag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T = f32> {
    pub values: Matrix<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn all_valid(values: Matrix<T>) -> Self {
        let mask = vec![true; values.rows];
        Self { values, mask }
    }

    pub fn n(&self) -> usize {
        self.values.rows
    }

    pub fn d(&self) -> usize {
        self.values.cols
    }
}

/// A pooled sentence vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector<T = f32> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Scalar>(&self) -> LatentVector<U> {
        LatentVector {
            values: self.values.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Arithmetic mean over the valid rows only.
pub fn mean_pool<T: Scalar>(emb: &EmbeddingMatrix<T>) -> Result<LatentVector<T>> {
    let valid = emb.mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::NothingToPool);
    }
    let mut out = vec![T::zero(); emb.d()];
    for (i, _) in emb.mask.iter().enumerate().filter(|(_, &m)| m) {
        for (o, &x) in out.iter_mut().zip(emb.values.row(i)) {
            *o += x;
        }
    }
    let inv = T::one() / T::of(valid as f64);
    for o in &mut out {
        *o *= inv;
    }
    Ok(LatentVector::new(out))
}

/// Mean over all rows of a matrix.
pub(crate) fn mean_rows<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols];
    for i in 0..m.rows {
        for (o, &x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    let inv = T::one() / T::of(m.rows as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Backward of [`mean_rows`]: spreads `grad` evenly over `rows` rows.
pub(crate) fn mean_rows_backward<T: Scalar>(grad: &[T], rows: usize) -> Matrix<T> {
    let inv = T::one() / T::of(rows as f64);
    let row: Vec<T> = grad.iter().map(|&g| g * inv).collect();
    let mut out = Matrix::zeros(rows, grad.len());
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

pub fn cosine_similarity<T: Scalar>(a: &LatentVector<T>, b: &LatentVector<T>) -> Result<T> {
    cosine_slices(&a.values, &b.values)
}

pub(crate) fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Cosine similarity and its gradient with respect to `a`.
pub(crate) fn cosine_grad_a<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    // d cos / da = b/(|a||b|) - cos · a/|a|²
    let g = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect();
    Ok((c, g))
}

/// Numerically stable softmax of `logits / tau`.
pub fn softmax_with_temperature<T: Scalar>(logits: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {:?}",
            tau
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logits".into()));
    }
    let mut out: Vec<T> = logits.iter().map(|&x| x / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax, stable.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// `-ln p[target]` for an already-normalized distribution.
pub fn cross_entropy<T: Scalar>(probs: &[T], target: usize) -> Result<T> {
    let p = probs.get(target).ok_or_else(|| {
        Error::InvalidArgument(format!("target {target} out of {} classes", probs.len()))
    })?;
    Ok(-p.ln())
}

/// Mean of `-ln p[target]` over a batch of distributions.
pub fn cross_entropy_batch<T: Scalar>(probs: &[Vec<T>], targets: &[usize]) -> Result<T> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} distributions vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut s = T::zero();
    for (p, &t) in probs.iter().zip(targets) {
        s += cross_entropy(p, t)?;
    }
    Ok(s / T::of(probs.len() as f64))
}

/// Cross-entropy from raw logits, returning the loss and `d loss / d logits`.
pub(crate) fn cross_entropy_logits<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let loss = -log_softmax(logits)[target];
    p[target] -= T::one();
    (loss, p)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
