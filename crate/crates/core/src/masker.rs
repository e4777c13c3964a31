//! Token attribution with a locally weighted linear surrogate of a style
//! classifier, and thresholded masking of the attributed tokens.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::StyleScorer;
use crate::corpus::{TextExample, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::nn::train::rng_for;

pub const DEFAULT_MU: f64 = 0.1;
pub const DEFAULT_N_SAMPLES: usize = 500;
pub const MIN_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub n_samples: usize,
    /// Probability that a token survives a perturbation.
    pub keep_prob: f64,
    pub ridge: f64,
    /// Kernel width is `kernel_scale · √n`.
    pub kernel_scale: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { n_samples: DEFAULT_N_SAMPLES, keep_prob: 0.5, ridge: 1.0, kernel_scale: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// One weight per token, positive toward the biased class.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub sample_count: usize,
    /// Weighted R² of the surrogate on its own samples.
    pub surrogate_fit: f64,
}

/// Weighted ridge fit on standardized columns, reported on the original
/// scale. Returns (coefficients, intercept, weighted R²).
pub fn weighted_ridge(x: &[Vec<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<(Vec<f64>, f64, f64)> {
    let m = x.len();
    if m == 0 || y.len() != m || w.len() != m {
        return Err(Error::Shape("ridge inputs must be non-empty and aligned".into()));
    }
    let p = x[0].len();
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::InvalidArgument("sample weights sum to zero".into()));
    }
    let mean = |f: &dyn Fn(usize) -> f64| (0..m).map(|i| w[i] * f(i)).sum::<f64>() / sw;
    let mu: Vec<f64> = (0..p).map(|j| mean(&|i| x[i][j])).collect();
    let sd: Vec<f64> = (0..p).map(|j| mean(&|i| (x[i][j] - mu[j]).powi(2)).sqrt()).collect();
    let ybar = mean(&|i| y[i]);

    let xs = DMatrix::from_fn(m, p, |i, j| if sd[j] > 1e-12 { (x[i][j] - mu[j]) / sd[j] } else { 0.0 });
    let wv = DVector::from_column_slice(w);
    let yc = DVector::from_fn(m, |i, _| y[i] - ybar);
    let xw = DMatrix::from_fn(m, p, |i, j| xs[(i, j)] * wv[i]);
    let mut a = xw.transpose() * &xs;
    for j in 0..p {
        a[(j, j)] += lambda;
    }
    let rhs = xw.transpose() * yc;
    let beta_s = a
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("ridge system not positive definite".into()))?
        .solve(&rhs);
    let coef: Vec<f64> = (0..p).map(|j| if sd[j] > 1e-12 { beta_s[j] / sd[j] } else { 0.0 }).collect();
    let intercept = ybar - coef.iter().zip(&mu).map(|(c, u)| c * u).sum::<f64>();

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..m {
        let pred = intercept + coef.iter().zip(&x[i]).map(|(c, v)| c * v).sum::<f64>();
        ss_res += w[i] * (y[i] - pred).powi(2);
        ss_tot += w[i] * (y[i] - ybar).powi(2);
    }
    let r2 = if ss_tot > 1e-300 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((coef, intercept, r2))
}

/// Locality weight of a presence vector with `kept` of `n` tokens.
pub fn kernel_weight(kept: usize, n: usize, kernel_scale: f64) -> f64 {
    let d = 1.0 - (kept as f64 / n as f64).sqrt();
    let sigma = kernel_scale * (n as f64).sqrt();
    (-(d * d) / (sigma * sigma)).exp()
}

/// Attributes P(biased) to tokens of `ids`. The unperturbed sentence is the
/// first sample; the rest drop each token independently, and samples with
/// every token dropped are redrawn.
pub fn explain_ids<S: StyleScorer + ?Sized>(f: &S, ids: &[u32], cfg: &ExplainConfig, seed: u64) -> Result<Attribution> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::EmptyText);
    }
    if cfg.n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("n_samples must be at least {MIN_SAMPLES}")));
    }
    if !(cfg.keep_prob > 0.0 && cfg.keep_prob < 1.0) {
        return Err(Error::InvalidArgument("keep_prob must lie in (0, 1)".into()));
    }
    let mut rng = rng_for(seed, &[0x4C49_4D45, n as u64]);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(cfg.n_samples);
    masks.push(vec![true; n]);
    while masks.len() < cfg.n_samples {
        let m: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.keep_prob).collect();
        if m.iter().any(|&b| b) {
            masks.push(m);
        }
    }

    let mut unique: Vec<&Vec<bool>> = masks.iter().collect();
    unique.sort();
    unique.dedup();
    let scores: Vec<f64> = unique
        .par_iter()
        .map(|m| {
            let kept: Vec<u32> = ids.iter().zip(m.iter()).filter(|(_, &k)| k).map(|(&t, _)| t).collect();
            f.score(&kept).map(|p| p[1])
        })
        .collect::<Result<_>>()?;
    let lookup: HashMap<&Vec<bool>, f64> = unique.into_iter().zip(scores).collect();

    let x: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let y: Vec<f64> = masks.iter().map(|m| lookup[m]).collect();
    let w: Vec<f64> = masks
        .iter()
        .map(|m| kernel_weight(m.iter().filter(|&&b| b).count(), n, cfg.kernel_scale))
        .collect();
    let (weights, intercept, surrogate_fit) = weighted_ridge(&x, &y, &w, cfg.ridge)?;
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite attribution".into()));
    }
    Ok(Attribution { weights, intercept, sample_count: masks.len(), surrogate_fit })
}

pub fn explain_tokens<S: StyleScorer + ?Sized>(f: &S, x: &TextExample, n_samples: usize, seed: u64) -> Result<Attribution> {
    explain_ids(f, &x.tokens, &ExplainConfig { n_samples, ..Default::default() }, seed)
}

/// A sentence with some positions replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedText {
    pub tokens: Vec<u32>,
    pub masked_positions: Vec<usize>,
    pub original: TextExample,
}

impl MaskedText {
    /// Masks `positions` (sorted, deduplicated). Special tokens are never masked.
    pub fn from_positions(original: &TextExample, positions: &[usize]) -> Result<Self> {
        let mut pos: Vec<usize> = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        if let Some(&p) = pos.iter().find(|&&p| p >= original.tokens.len()) {
            return Err(Error::InvalidArgument(format!("position {p} outside sentence")));
        }
        pos.retain(|&p| !Vocabulary::is_special(original.tokens[p]));
        let mut tokens = original.tokens.clone();
        for &p in &pos {
            tokens[p] = MASK;
        }
        Ok(Self { tokens, masked_positions: pos, original: original.clone() })
    }

    pub fn unmasked(original: &TextExample) -> Self {
        Self { tokens: original.tokens.clone(), masked_positions: Vec::new(), original: original.clone() }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_positions.binary_search(&i).is_ok()
    }

    /// Original ids at the masked positions.
    pub fn removed_tokens(&self) -> Vec<u32> {
        self.masked_positions.iter().map(|&p| self.original.tokens[p]).collect()
    }
}

/// Masks exactly the positions whose weight exceeds `mu`.
pub fn mask_attributes(attr: &Attribution, x: &TextExample, mu: f64) -> Result<MaskedText> {
    if attr.weights.len() != x.tokens.len() {
        return Err(Error::Shape(format!(
            "{} weights for a sentence of {} tokens",
            attr.weights.len(),
            x.tokens.len()
        )));
    }
    let pos: Vec<usize> = (0..attr.weights.len()).filter(|&i| attr.weights[i] > mu).collect();
    MaskedText::from_positions(x, &pos)
}
