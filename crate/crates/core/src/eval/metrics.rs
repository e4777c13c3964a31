use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kn::{perplexity, NgramModel};
use crate::classifiers::StyleScorer;
use crate::corpus::{Corpus, StyleLabel};
use crate::decoder::{transfer_text, TransferConfig, TransferModels, TransferOutput};
use crate::error::{Error, Result};
use crate::latent::pooled;
use crate::nn::{cosine_similarity, Encoder};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentPreservation {
    /// Mean clamped cosine × 100.
    pub percent: f64,
    /// Pairs whose cosine was negative and counted as 0.
    pub clamped: usize,
}

/// Mean cosine between pooled embeddings of aligned sentence pairs, as a
/// percentage. Negative cosines count as 0.
pub fn content_preservation(
    encoder: &Encoder<f32>,
    originals: &[Vec<u32>],
    transferred: &[Vec<u32>],
) -> Result<ContentPreservation> {
    if originals.len() != transferred.len() {
        return Err(Error::Shape(format!(
            "content preservation: {} originals vs {} transferred",
            originals.len(),
            transferred.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::InvalidArgument("content preservation of an empty corpus".into()));
    }
    let cos: Vec<f64> = originals
        .par_iter()
        .zip(transferred.par_iter())
        .map(|(a, b)| {
            if a == b {
                return Ok(1.0);
            }
            let (za, zb) = (pooled(encoder, a)?, pooled(encoder, b)?);
            Ok(cosine_similarity(&za.cast::<f64>(), &zb.cast::<f64>())?)
        })
        .collect::<Result<_>>()?;
    let clamped = cos.iter().filter(|&&c| c < 0.0).count();
    let mean = cos.iter().map(|c| c.max(0.0)).sum::<f64>() / cos.len() as f64;
    Ok(ContentPreservation { percent: 100.0 * mean, clamped })
}

/// Percentage of sentences the scorer assigns to `target`.
pub fn transfer_accuracy<S: StyleScorer + ?Sized>(f: &S, sentences: &[Vec<u32>], target: StyleLabel) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("transfer accuracy of an empty corpus".into()));
    }
    let hits: Vec<bool> = sentences
        .par_iter()
        .map(|s| {
            let p = f.score(s)?;
            let pred = if p[1] > p[0] { 1 } else { 0 };
            Ok(pred == target.index())
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Share of masked gold attribute slots whose replacement is in `neutral`.
/// `None` when no gold slot was masked.
pub fn gold_replacement_rate(outputs: &[TransferOutput], neutral: &[u32]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for o in outputs {
        let Some(gold) = &o.masked.original.gold_attribute_positions else { continue };
        for &p in gold {
            if o.masked.is_masked(p) {
                total += 1;
                hit += neutral.contains(&o.tokens[p]) as usize;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Share of gold attribute positions that were masked.
pub fn gold_mask_recall(outputs: &[TransferOutput]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for o in outputs {
        let Some(gold) = &o.masked.original.gold_attribute_positions else { continue };
        total += gold.len();
        hit += gold.iter().filter(|&&p| o.masked.is_masked(p)).count();
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub transfer_accuracy: f64,
    pub content_preservation: f64,
    pub perplexity: f64,
    pub cp_clamped: usize,
    pub sentences: usize,
    pub corpus_fingerprint: String,
    #[serde(default)]
    pub checkpoint_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_replacement_rate: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.transfer_accuracy) {
            return Err(Error::InvalidArgument(format!("accuracy {} out of range", self.transfer_accuracy)));
        }
        if !(self.perplexity >= 1.0) {
            return Err(Error::InvalidArgument(format!("perplexity {} below 1", self.perplexity)));
        }
        Ok(())
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system={}", self.system);
        let _ = writeln!(s, "transfer_accuracy={:.2}", self.transfer_accuracy);
        let _ = writeln!(s, "content_preservation={:.2}", self.content_preservation);
        let _ = writeln!(s, "perplexity={:.2}", self.perplexity);
        let _ = writeln!(s, "cp_clamped={}", self.cp_clamped);
        let _ = writeln!(s, "sentences={}", self.sentences);
        let _ = writeln!(s, "corpus_fingerprint={}", self.corpus_fingerprint);
        if let Some(r) = self.gold_replacement_rate {
            let _ = writeln!(s, "gold_replacement_rate={:.4}", r);
        }
        for (k, v) in &self.checkpoint_hashes {
            let _ = writeln!(s, "checkpoint.{k}={v}");
        }
        s
    }
}

/// Frozen evaluation-side models.
#[derive(Clone, Copy)]
pub struct EvalModels<'a> {
    pub classifier: &'a dyn StyleScorer,
    pub encoder: &'a Encoder<f32>,
    pub lm: &'a NgramModel,
}

/// Transfers every biased sentence of `test` to neutral.
pub fn transfer_corpus(test: &Corpus, models: TransferModels<'_>, cfg: &TransferConfig) -> Result<Vec<TransferOutput>> {
    let sources = test.with_label(StyleLabel::Biased);
    sources.examples.iter().map(|x| transfer_text(x, models, cfg)).collect()
}

/// Scores already-transferred sentences against their sources.
pub fn score_outputs(
    system: &str,
    sources: &[Vec<u32>],
    outputs: &[Vec<u32>],
    eval: EvalModels<'_>,
    fingerprint: &str,
) -> Result<MetricsReport> {
    let cp = content_preservation(eval.encoder, sources, outputs)?;
    let report = MetricsReport {
        system: system.into(),
        transfer_accuracy: transfer_accuracy(eval.classifier, outputs, StyleLabel::Neutral)?,
        content_preservation: cp.percent,
        perplexity: perplexity(eval.lm, outputs)?,
        cp_clamped: cp.clamped,
        sentences: outputs.len(),
        corpus_fingerprint: fingerprint.into(),
        checkpoint_hashes: BTreeMap::new(),
        gold_replacement_rate: None,
    };
    report.validate()?;
    Ok(report)
}

/// The original-text baseline row and the transferred row for `test`.
pub fn evaluate_corpus(
    test: &Corpus,
    models: TransferModels<'_>,
    cfg: &TransferConfig,
    eval: EvalModels<'_>,
    neutral_lexicon: &[u32],
) -> Result<(MetricsReport, MetricsReport, Vec<TransferOutput>)> {
    let outputs = transfer_corpus(test, models, cfg)?;
    let sources: Vec<Vec<u32>> = outputs.iter().map(|o| o.masked.original.tokens.clone()).collect();
    let transferred: Vec<Vec<u32>> = outputs.iter().map(|o| o.tokens.clone()).collect();
    let fp = test.fingerprint();
    let original = score_outputs("Original", &sources, &sources, eval, &fp)?;
    let mut ours = score_outputs("Full model", &sources, &transferred, eval, &fp)?;
    ours.gold_replacement_rate = gold_replacement_rate(&outputs, neutral_lexicon);
    Ok((original, ours, outputs))
}

/// Fixed-width table of report rows.
pub fn format_table(rows: &[MetricsReport]) -> String {
    let mut s = format!("{:<24} {:>8} {:>9} {:>8}\n", "system", "C.P.", "PPL", "AC");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>8.2} {:>9.2} {:>8.2}",
            r.system, r.content_preservation, r.perplexity, r.transfer_accuracy
        );
    }
    s
}
