use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, StyleLabel, TextExample};
use crate::error::{Error, Result};
use crate::nn::encoder::INIT_STD;
use crate::nn::ops::{cross_entropy_logits, mean_rows, mean_rows_backward};
use crate::nn::train::{apply_update, batch_gradients, derive_seed, rng_for, shuffled_indices};
use crate::nn::{
    Adam, Checkpoint, CheckpointHeader, Encoder, EncoderConfig, EncoderInput, Linear, Matrix, Params,
    Scalar, SoftRow, TrainConfig,
};

/// Soft rows must sum to one within this tolerance.
pub const SOFT_ROW_TOL: f64 = 1e-6;

const TAG_INIT: u64 = 0x1;
const TAG_SHUFFLE: u64 = 0x2;
const TAG_DROPOUT: u64 = 0x3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierRole {
    /// The classifier f explained by the masker and used by the decoder.
    Pipeline,
    /// Held-out classifier used only to score transfer accuracy.
    Evaluation,
}

impl ClassifierRole {
    pub fn checkpoint_role(self) -> &'static str {
        match self {
            ClassifierRole::Pipeline => "style_classifier",
            ClassifierRole::Evaluation => "eval_classifier",
        }
    }
}

/// A sentence where some positions carry distributions over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokenSequence<T = f32> {
    pub rows: Vec<SoftRow<T>>,
}

impl<T: Scalar> SoftTokenSequence<T> {
    pub fn from_ids(ids: &[u32]) -> Self {
        Self { rows: ids.iter().map(|&i| SoftRow::Hard(i)).collect() }
    }

    /// Checks every soft row is a finite, non-negative distribution.
    pub fn validate(&self) -> Result<()> {
        validate_rows(&self.rows)
    }

    pub fn as_input(&self) -> EncoderInput<'_, T> {
        EncoderInput::Rows(&self.rows)
    }
}

pub(crate) fn validate_rows<T: Scalar>(rows: &[SoftRow<T>]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if let SoftRow::Soft(p) = r {
            let mut sum = 0.0;
            for &v in p {
                let v = v.as_f64();
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::UnnormalizedRow { row: i, sum: f64::NAN });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SOFT_ROW_TOL {
                return Err(Error::UnnormalizedRow { row: i, sum });
            }
        }
    }
    Ok(())
}

/// Two-way softmax computed in f64.
pub(crate) fn probs2<T: Scalar>(logits: &[T]) -> [f64; 2] {
    let (a, b) = (logits[0].as_f64(), logits[1].as_f64());
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Anything that scores token sequences as (P(neutral), P(biased)).
pub trait StyleScorer: Sync {
    fn score(&self, ids: &[u32]) -> Result<[f64; 2]>;
}

/// Encoder followed by a linear head on the mean-pooled output.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier<T: Scalar = f32> {
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
    pub role: ClassifierRole,
    pub train_fingerprint: String,
    pub dev_accuracy: f64,
}

/// Loss, parameter gradients, and the gradient with respect to encoder input rows.
pub struct ClassifierGrad<T: Scalar> {
    pub loss: T,
    pub grads: StyleClassifier<T>,
    pub d_input: Matrix<T>,
}

impl<T: Scalar> StyleClassifier<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        cfg: &EncoderConfig,
        vocab_size: usize,
        role: ClassifierRole,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(cfg, vocab_size, rng)?;
        let head = Linear::new(cfg.d, 2, INIT_STD, rng);
        Ok(Self { encoder, head, role, train_fingerprint: String::new(), dev_accuracy: 0.0 })
    }

    pub fn logits(&self, input: EncoderInput<'_, T>) -> Result<Vec<T>> {
        let (h, _) = self.encoder.forward(input, None)?;
        Ok(self.head.forward_vec(&mean_rows(&h)))
    }

    /// (P(neutral), P(biased)). Soft rows must be normalized.
    pub fn predict_style(&self, input: EncoderInput<'_, T>) -> Result<[f64; 2]> {
        if let EncoderInput::Rows(rows) = &input {
            validate_rows(rows)?;
        }
        Ok(probs2(&self.logits(input)?))
    }

    /// Cross-entropy against `target` with full backward. `rng` enables dropout.
    pub fn loss_grad(
        &self,
        input: EncoderInput<'_, T>,
        target: usize,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<ClassifierGrad<T>> {
        let (h, cache) = self.encoder.forward(input.clone(), rng)?;
        let pooled = mean_rows(&h);
        let logits = self.head.forward_vec(&pooled);
        let (loss, dlogits) = cross_entropy_logits(&logits, target);
        let mut grads = self.zeros_like();
        let dpooled = self.head.backward_vec(&pooled, &dlogits, &mut grads.head);
        let dh = mean_rows_backward(&dpooled, h.rows);
        let d_input = self.encoder.backward(input, &cache, &dh, &mut grads.encoder);
        Ok(ClassifierGrad { loss, grads, d_input })
    }
}

impl<T: Scalar> Params<T> for StyleClassifier<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.encoder.tensors();
        v.extend(self.head.tensors_named("head"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

impl StyleScorer for StyleClassifier<f32> {
    fn score(&self, ids: &[u32]) -> Result<[f64; 2]> {
        self.predict_style(EncoderInput::Ids(ids))
    }
}

impl StyleClassifier<f32> {
    pub fn to_checkpoint(&self, seed: u64, vocab_hash: &str) -> Result<Checkpoint> {
        let mut header = CheckpointHeader {
            role: self.role.checkpoint_role().into(),
            config: serde_json::to_value(&self.encoder.cfg)?,
            vocab_hash: vocab_hash.into(),
            seed,
            step: 0,
            extra: Default::default(),
        };
        header.extra.insert("train_fingerprint".into(), self.train_fingerprint.clone().into());
        header.extra.insert("dev_accuracy".into(), self.dev_accuracy.into());
        header.extra.insert("vocab_size".into(), self.encoder.vocab_size.into());
        Ok(Checkpoint::from_params(header, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let role = match ck.header.role.as_str() {
            "style_classifier" => ClassifierRole::Pipeline,
            "eval_classifier" => ClassifierRole::Evaluation,
            r => return Err(Error::Checkpoint(format!("expected a classifier checkpoint, found role `{r}`"))),
        };
        let cfg: EncoderConfig = serde_json::from_value(ck.header.config.clone())?;
        let vocab_size = extra_usize(ck, "vocab_size")?;
        let mut m = Self::new(&cfg, vocab_size, role, &mut rng_for(0, &[]))?;
        ck.load_into(&mut m)?;
        m.train_fingerprint = ck
            .header
            .extra
            .get("train_fingerprint")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        m.dev_accuracy = ck.header.extra.get("dev_accuracy").and_then(|v| v.as_f64()).unwrap_or(0.0);
        Ok(m)
    }
}

pub(crate) fn extra_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.header
        .extra
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))
}

/// Fraction of examples whose argmax class matches the label.
pub fn classifier_accuracy<S: StyleScorer + ?Sized>(model: &S, corpus: &Corpus, max_len: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty corpus".into()));
    }
    let hits: Vec<bool> = corpus
        .examples
        .par_iter()
        .map(|e| {
            let p = model.score(clip(&e.tokens, max_len))?;
            Ok((p[1] > p[0]) == (e.label == StyleLabel::Biased))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub(crate) fn clip(tokens: &[u32], max_len: usize) -> &[u32] {
    &tokens[..tokens.len().min(max_len)]
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub dev_accuracies: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains a classifier from scratch and returns the epoch with the best dev
/// accuracy (earliest on ties).
pub fn train_style_classifier(
    train: &Corpus,
    dev: &Corpus,
    cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    seed: u64,
    role: ClassifierRole,
) -> Result<(StyleClassifier, TrainReport)> {
    if train.count(StyleLabel::Neutral) == 0 || train.count(StyleLabel::Biased) == 0 {
        return Err(Error::SingleClass);
    }
    if tcfg.batch_size == 0 || tcfg.epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epochs must be positive".into()));
    }
    let mut model = StyleClassifier::new(cfg, train.vocab.len(), role, &mut rng_for(seed, &[TAG_INIT]))?;
    model.train_fingerprint = train.fingerprint();
    let mut opt = Adam::new(&model);
    let mut best: Option<StyleClassifier> = None;
    let mut report = TrainReport::default();
    let examples: &[TextExample] = &train.examples;
    let shuffle_seed = derive_seed(seed, &[TAG_SHUFFLE]);
    let mut step = 0u64;

    for epoch in 0..tcfg.epochs {
        let order = shuffled_indices(examples.len(), shuffle_seed, epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let m = &model;
            let (loss, grads) = batch_gradients(chunk, |_, &i| {
                let e = &examples[i];
                let mut r = rng_for(seed, &[TAG_DROPOUT, step, i as u64]);
                let g = m.loss_grad(
                    EncoderInput::Ids(clip(&e.tokens, cfg.max_len)),
                    e.label.index(),
                    Some(&mut r),
                )?;
                Ok((g.loss as f64, g.grads))
            })?
            .expect("non-empty batch");
            apply_update(&mut model, &mut opt, grads, chunk.len(), tcfg)?;
            epoch_loss += loss;
            step += 1;
        }
        let acc = classifier_accuracy(&model, dev, cfg.max_len)?;
        log::info!(
            "{} epoch {}: loss {:.4} dev acc {:.4}",
            role.checkpoint_role(),
            epoch + 1,
            epoch_loss / examples.len() as f64,
            acc
        );
        report.epoch_losses.push(epoch_loss / examples.len() as f64);
        report.dev_accuracies.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.dev_accuracy) {
            let mut snap = model.clone();
            snap.dev_accuracy = acc;
            best = Some(snap);
            report.best_epoch = epoch;
        }
    }
    Ok((best.expect("at least one epoch"), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig { d: 8, layers: 1, heads: 2, ffn_width: 16, max_len: 6, dropout: 0.0 }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m: StyleClassifier<f32> =
            StyleClassifier::new(&tiny(), 12, ClassifierRole::Pipeline, &mut rng_for(1, &[])).unwrap();
        let p = m.predict_style(EncoderInput::Ids(&[5, 6, 7])).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_rows_match_hard_ids() {
        let m: StyleClassifier<f32> =
            StyleClassifier::new(&tiny(), 12, ClassifierRole::Pipeline, &mut rng_for(2, &[])).unwrap();
        let ids = [5u32, 9, 7, 11];
        let rows: Vec<SoftRow<f32>> = ids
            .iter()
            .map(|&i| {
                let mut p = vec![0.0; 12];
                p[i as usize] = 1.0;
                SoftRow::Soft(p)
            })
            .collect();
        let hard = m.predict_style(EncoderInput::Ids(&ids)).unwrap();
        let soft = m.predict_style(EncoderInput::Rows(&rows)).unwrap();
        assert!((hard[0] - soft[0]).abs() < 1e-6);
    }

    #[test]
    fn unnormalized_row_rejected() {
        let m: StyleClassifier<f32> =
            StyleClassifier::new(&tiny(), 12, ClassifierRole::Pipeline, &mut rng_for(3, &[])).unwrap();
        let rows = vec![SoftRow::Hard(5), SoftRow::Soft(vec![0.1; 12])];
        assert!(matches!(
            m.predict_style(EncoderInput::Rows(&rows)),
            Err(Error::UnnormalizedRow { row: 1, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m: StyleClassifier<f32> =
            StyleClassifier::new(&tiny(), 12, ClassifierRole::Evaluation, &mut rng_for(4, &[])).unwrap();
        m.train_fingerprint = "abc".into();
        m.dev_accuracy = 0.75;
        let ck = m.to_checkpoint(4, "h").unwrap();
        let back = StyleClassifier::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
    }
}
