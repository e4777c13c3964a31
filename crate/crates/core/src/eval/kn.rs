//! Interpolated Kneser–Ney n-gram language model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 5;
pub const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ContextStats {
    /// Sum of (continuation) counts over following words.
    total: u64,
    /// Following word → (continuation) count.
    words: HashMap<u32, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgramModel {
    pub order: usize,
    /// Size of the id space; larger ids score as `[UNK]`.
    pub vocab_size: usize,
    /// Number of predictable types for the uniform floor.
    pub base_size: usize,
    /// `levels[k-1]`: context of length k−1 → stats. The top level holds raw
    /// counts; lower levels hold continuation counts.
    levels: Vec<HashMap<Vec<u32>, ContextStats>>,
    pub discounts: Vec<f64>,
}

fn pad(tokens: &[u32], order: usize, vocab_size: usize) -> Vec<u32> {
    let mut v = vec![BOS; order - 1];
    v.extend(tokens.iter().map(|&t| if (t as usize) < vocab_size { t } else { UNK }));
    v.push(EOS);
    v
}

impl NgramModel {
    /// A model that assigns `1/v` to every word in every context.
    pub fn uniform(v: usize) -> Self {
        Self { order: 1, vocab_size: v, base_size: v, levels: vec![HashMap::new()], discounts: vec![FALLBACK_DISCOUNT] }
    }

    /// Ids this model distributes probability over.
    pub fn predictable_ids(&self) -> Vec<u32> {
        if self.base_size == self.vocab_size {
            (0..self.vocab_size as u32).collect()
        } else {
            (0..self.vocab_size as u32).filter(|&i| i != PAD && i != BOS).collect()
        }
    }

    /// Contexts (length `k−1`) with at least one observation at order `k`.
    pub fn observed_contexts(&self, k: usize) -> Vec<Vec<u32>> {
        let mut v: Vec<Vec<u32>> = self.levels[k - 1].keys().cloned().collect();
        v.sort();
        v
    }

    /// P(w | ctx) using the last `k−1` context tokens and orders `k` and below.
    pub fn prob_at_order(&self, k: usize, w: u32, ctx: &[u32]) -> f64 {
        let floor = 1.0 / self.base_size as f64;
        if k == 0 {
            return floor;
        }
        let ctx = &ctx[ctx.len().saturating_sub(k - 1)..];
        let lower = self.prob_at_order(k - 1, w, ctx.get(1..).unwrap_or(&[]));
        if ctx.len() < k - 1 {
            return lower;
        }
        match self.levels[k - 1].get(ctx) {
            Some(s) if s.total > 0 => {
                let d = self.discounts[k - 1];
                let c = s.words.get(&w).copied().unwrap_or(0) as f64;
                let total = s.total as f64;
                (c - d).max(0.0) / total + d * s.words.len() as f64 / total * lower
            }
            _ => lower,
        }
    }

    pub fn prob(&self, w: u32, ctx: &[u32]) -> f64 {
        self.prob_at_order(self.order, w, ctx)
    }

    /// Total negative log-likelihood and number of predicted tokens
    /// (sentence tokens plus `[EOS]`).
    pub fn sentence_nll(&self, tokens: &[u32]) -> (f64, usize) {
        let p = pad(tokens, self.order, self.vocab_size);
        let start = self.order - 1;
        let nll = (start..p.len())
            .map(|i| -self.prob(p[i], &p[i + 1 - self.order..i]).ln())
            .sum();
        (nll, p.len() - start)
    }
}

/// Count-of-counts discount `n1 / (n1 + 2·n2)`, or the fallback.
fn discount(counts: impl Iterator<Item = u64>, k: usize) -> f64 {
    let (mut n1, mut n2) = (0u64, 0u64);
    for c in counts {
        match c {
            1 => n1 += 1,
            2 => n2 += 1,
            _ => {}
        }
    }
    let d = n1 as f64 / (n1 + 2 * n2) as f64;
    if d > 0.0 && d < 1.0 {
        d
    } else {
        log::warn!("order {k}: cannot estimate discount (n1={n1}, n2={n2}); using {FALLBACK_DISCOUNT}");
        FALLBACK_DISCOUNT
    }
}

/// Trains an interpolated Kneser–Ney model with one discount per order.
pub fn train_kn_lm(corpus: &[Vec<u32>], order: usize, vocab_size: usize) -> Result<NgramModel> {
    if order < 2 {
        return Err(Error::InvalidArgument("order must be at least 2".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty language-model corpus".into()));
    }
    if vocab_size <= BOS as usize + 1 {
        return Err(Error::InvalidArgument("vocabulary too small".into()));
    }
    // top order: raw counts of every padded window
    let mut top: HashMap<Vec<u32>, u64> = HashMap::new();
    for s in corpus {
        let p = pad(s, order, vocab_size);
        for win in p.windows(order) {
            *top.entry(win.to_vec()).or_default() += 1;
        }
    }
    // lower orders: number of distinct left extensions of each suffix
    let mut ngram_counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for k in 1..order {
        let mut ext: HashMap<Vec<u32>, std::collections::HashSet<u32>> = HashMap::new();
        for win in top.keys() {
            let suffix = &win[order - k..];
            ext.entry(suffix.to_vec()).or_default().insert(win[order - k - 1]);
        }
        ngram_counts[k - 1] = ext.into_iter().map(|(g, s)| (g, s.len() as u64)).collect();
    }
    ngram_counts[order - 1] = top;

    let mut levels = Vec::with_capacity(order);
    let mut discounts = Vec::with_capacity(order);
    for (k, counts) in ngram_counts.into_iter().enumerate() {
        discounts.push(discount(counts.values().copied(), k + 1));
        let mut level: HashMap<Vec<u32>, ContextStats> = HashMap::new();
        for (g, c) in counts {
            let (ctx, w) = g.split_at(k);
            let s = level.entry(ctx.to_vec()).or_default();
            s.total += c;
            *s.words.entry(w[0]).or_default() += c;
        }
        levels.push(level);
    }
    Ok(NgramModel { order, vocab_size, base_size: vocab_size - 2, levels, discounts })
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity(lm: &NgramModel, corpus: &[Vec<u32>]) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for s in corpus {
        let (l, c) = lm.sentence_nll(s);
        nll += l;
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("perplexity of an empty corpus".into()));
    }
    Ok((nll / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_perplexity_is_v() {
        let lm = NgramModel::uniform(57);
        let ppl = perplexity(&lm, &[vec![5, 6, 7], vec![9]]).unwrap();
        assert!((ppl - 57.0).abs() < 1e-6);
    }

    #[test]
    fn counts_dominate() {
        let (a, b) = (5u32, 6u32);
        let s: Vec<u32> = (0..20).map(|i| if i % 2 == 0 { a } else { b }).collect();
        let lm = train_kn_lm(&[s], 3, 10).unwrap();
        assert!(lm.prob(b, &[b, a]) > lm.prob(a, &[b, a]));
        assert!(lm.prob_at_order(2, b, &[a]) > lm.prob_at_order(2, a, &[a]));
    }

    #[test]
    fn normalized_everywhere() {
        let corpus: Vec<Vec<u32>> = (0..30).map(|i| vec![5 + i % 3, 6 + i % 4, 5, 9 - i % 2]).collect();
        let lm = train_kn_lm(&corpus, 4, 12).unwrap();
        let ids = lm.predictable_ids();
        for k in 1..=4 {
            for ctx in lm.observed_contexts(k) {
                let s: f64 = ids.iter().map(|&w| lm.prob_at_order(k, w, &ctx)).sum();
                assert!((s - 1.0).abs() < 1e-9, "order {k} ctx {ctx:?}: {s}");
            }
        }
    }

    #[test]
    fn single_sentence() {
        let lm = train_kn_lm(&[vec![5, 6, 7]], 5, 10).unwrap();
        assert!(perplexity(&lm, &[vec![5, 6, 7]]).unwrap().is_finite());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(train_kn_lm(&[vec![5]], 1, 10).is_err());
        assert!(train_kn_lm(&[], 3, 10).is_err());
    }

    #[test]
    fn order_invariant() {
        let corpus: Vec<Vec<u32>> = (0..10).map(|i| vec![5 + i % 3, 6, 7 + i % 2]).collect();
        let lm = train_kn_lm(&corpus, 3, 12).unwrap();
        let mut rev = corpus.clone();
        rev.reverse();
        assert!((perplexity(&lm, &corpus).unwrap() - perplexity(&lm, &rev).unwrap()).abs() < 1e-9);
    }
}
