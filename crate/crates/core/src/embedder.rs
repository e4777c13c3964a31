//! Masked-language-model token embedder and its classification head.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{clip, extra_usize};
use crate::corpus::{Corpus, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::masker::MaskedText;
use crate::nn::encoder::INIT_STD;
use crate::nn::ops::cross_entropy_logits;
use crate::nn::train::{derive_seed, rng_for, train_epochs, ExampleGrad};
use crate::nn::{
    Checkpoint, CheckpointHeader, EmbeddingMatrix, Encoder, EncoderConfig, EncoderInput, Linear, Matrix, Params,
    Scalar, TrainConfig,
};

pub const DEFAULT_MASK_RATE: f64 = 0.2;

const TAG_INIT: u64 = 0x21;
const TAG_SHUFFLE: u64 = 0x22;
const TAG_MASK: u64 = 0x23;
const TAG_DROPOUT: u64 = 0x24;

/// A sentence with MLM corruption applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmBatch {
    pub input: Vec<u32>,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

impl MlmBatch {
    pub fn is_masked(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }
}

/// Masks each non-special position with probability `rate`, redrawing until
/// at least one position is masked.
pub fn apply_mlm_mask_with<R: Rng + ?Sized>(x: &[u32], rate: f64, rng: &mut R) -> Result<MlmBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside (0, 1)")));
    }
    if x.iter().all(|&t| Vocabulary::is_special(t)) {
        return Err(Error::InvalidArgument("no maskable position".into()));
    }
    loop {
        let positions: Vec<usize> = (0..x.len())
            .filter(|&i| !Vocabulary::is_special(x[i]) && rng.random::<f64>() < rate)
            .collect();
        if positions.is_empty() {
            continue;
        }
        let mut input = x.to_vec();
        let targets = positions.iter().map(|&p| x[p]).collect();
        for &p in &positions {
            input[p] = MASK;
        }
        return Ok(MlmBatch { input, positions, targets });
    }
}

pub fn apply_mlm_mask(x: &[u32], rate: f64, seed: u64) -> Result<MlmBatch> {
    apply_mlm_mask_with(x, rate, &mut rng_for(seed, &[TAG_MASK]))
}

/// Cross-entropy summed over `positions` of a linear head applied to the rows
/// of `h`. Accumulates head gradients into `g` and returns `dL/dh`.
pub(crate) fn head_loss_backward<T: Scalar>(
    head: &Linear<T>,
    h: &Matrix<T>,
    positions: &[usize],
    targets: &[u32],
    g: &mut Linear<T>,
) -> (T, Matrix<T>) {
    let mut dh = Matrix::zeros(h.rows, h.cols);
    let mut loss = T::zero();
    for (&p, &t) in positions.iter().zip(targets) {
        let logits = head.forward_vec(h.row(p));
        let (l, dlogits) = cross_entropy_logits(&logits, t as usize);
        loss += l;
        let dx = head.backward_vec(h.row(p), &dlogits, g);
        dh.row_mut(p).copy_from_slice(&dx);
    }
    (loss, dh)
}

/// Encoder plus a separate linear head over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedder<T: Scalar = f32> {
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
    pub mask_rate: f64,
    pub train_fingerprint: String,
}

impl<T: Scalar> TokenEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg, vocab_size, rng)?;
        let head = Linear::new(cfg.d, vocab_size, INIT_STD, rng);
        Ok(Self { encoder, head, mask_rate: DEFAULT_MASK_RATE, train_fingerprint: String::new() })
    }

    /// Summed masked-token cross-entropy with gradients.
    pub fn mlm_loss_grad(
        &self,
        batch: &MlmBatch,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<(T, TokenEmbedder<T>)> {
        let (h, cache) = self.encoder.forward(EncoderInput::Ids(&batch.input), rng)?;
        let mut g = self.zeros_like();
        let (loss, dh) = head_loss_backward(&self.head, &h, &batch.positions, &batch.targets, &mut g.head);
        self.encoder.backward(EncoderInput::Ids(&batch.input), &cache, &dh, &mut g.encoder);
        Ok((loss, g))
    }

    /// Head logits at every masked position (inference mode).
    pub fn masked_logits(&self, batch: &MlmBatch) -> Result<Vec<Vec<T>>> {
        let (h, _) = self.encoder.forward(EncoderInput::Ids(&batch.input), None)?;
        Ok(batch.positions.iter().map(|&p| self.head.forward_vec(h.row(p))).collect())
    }

    /// Summed masked-token cross-entropy, inference mode.
    pub fn mlm_loss(&self, batch: &MlmBatch) -> Result<f64> {
        let logits = self.masked_logits(batch)?;
        Ok(logits
            .iter()
            .zip(&batch.targets)
            .map(|(l, &t)| cross_entropy_logits(l, t as usize).0.as_f64())
            .sum())
    }
}

impl<T: Scalar> Params<T> for TokenEmbedder<T> {
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

/// Contextual embeddings of a masked sentence.
pub fn embed_masked_text<T: Scalar>(embedder: &TokenEmbedder<T>, xprime: &MaskedText) -> Result<EmbeddingMatrix<T>> {
    embedder.encoder.embed_tokens(&xprime.tokens)
}

impl TokenEmbedder<f32> {
    pub fn to_checkpoint(&self, role: &str, seed: u64, vocab_hash: &str) -> Result<Checkpoint> {
        let mut header = CheckpointHeader {
            role: role.into(),
            config: serde_json::to_value(&self.encoder.cfg)?,
            vocab_hash: vocab_hash.into(),
            seed,
            ..Default::default()
        };
        header.extra.insert("vocab_size".into(), self.encoder.vocab_size.into());
        header.extra.insert("mask_rate".into(), self.mask_rate.into());
        header.extra.insert("train_fingerprint".into(), self.train_fingerprint.clone().into());
        Ok(Checkpoint::from_params(header, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: EncoderConfig = serde_json::from_value(ck.header.config.clone())?;
        let mut m = Self::new(&cfg, extra_usize(ck, "vocab_size")?, &mut rng_for(0, &[]))?;
        ck.load_into(&mut m)?;
        m.mask_rate = ck.header.extra.get("mask_rate").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_MASK_RATE);
        m.train_fingerprint = ck
            .header
            .extra
            .get("train_fingerprint")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .into();
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MlmReport {
    /// Mean loss per masked token before the first update.
    pub initial_loss: f64,
    /// Mean loss per masked token, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean per-token masked loss over `corpus` under seeded masks.
pub fn mlm_eval_loss(embedder: &TokenEmbedder, corpus: &Corpus, seed: u64) -> Result<f64> {
    let max_len = embedder.encoder.cfg.max_len;
    let parts: Vec<(f64, usize)> = corpus
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let b = apply_mlm_mask_with(clip(&e.tokens, max_len), embedder.mask_rate, &mut rng_for(seed, &[TAG_MASK, i as u64]))?;
            Ok((embedder.mlm_loss(&b)?, b.positions.len()))
        })
        .collect::<Result<_>>()?;
    let (l, n) = parts.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(l / n.max(1) as f64)
}

/// Fraction of masked tokens whose original id is among the head's top `k`
/// predictions, under seeded masks.
pub fn mlm_recovery(embedder: &TokenEmbedder, corpus: &Corpus, k: usize, seed: u64) -> Result<f64> {
    let max_len = embedder.encoder.cfg.max_len;
    let parts: Vec<(usize, usize)> = corpus
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let b = apply_mlm_mask_with(clip(&e.tokens, max_len), embedder.mask_rate, &mut rng_for(seed, &[TAG_MASK, i as u64]))?;
            let logits = embedder.masked_logits(&b)?;
            let hits = logits
                .iter()
                .zip(&b.targets)
                .filter(|(l, &t)| top_k(l, k).contains(&(t as usize)))
                .count();
            Ok((hits, b.positions.len()))
        })
        .collect::<Result<_>>()?;
    let (h, n) = parts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(h as f64 / n.max(1) as f64)
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Trains encoder and head on random masks over both styles.
pub fn train_token_embedder(
    corpus: &Corpus,
    cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(TokenEmbedder, MlmReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut model = TokenEmbedder::new(cfg, corpus.vocab.len(), &mut rng_for(seed, &[TAG_INIT]))?;
    model.train_fingerprint = corpus.fingerprint();
    let initial_loss = mlm_eval_loss(&model, corpus, derive_seed(seed, &[TAG_MASK]))?;
    let rate = model.mask_rate;
    let losses = train_epochs(
        &mut model,
        &corpus.examples,
        tcfg,
        derive_seed(seed, &[TAG_SHUFFLE]),
        |m: &TokenEmbedder, ctx, e| {
            let mut r = rng_for(seed, &[TAG_DROPOUT, ctx.epoch as u64, ctx.index as u64]);
            let b = apply_mlm_mask_with(clip(&e.tokens, cfg.max_len), rate, &mut r)?;
            let (loss, grads) = m.mlm_loss_grad(&b, Some(&mut r))?;
            Ok(ExampleGrad { loss: loss as f64, weight: b.positions.len() as f64, grads })
        },
        |epoch, _, loss| {
            log::info!("token embedder epoch {}: loss {loss:.4}", epoch + 1);
            Ok(())
        },
    )?;
    Ok((model, MlmReport { initial_loss, epoch_losses: losses }))
}
