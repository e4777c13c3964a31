//! Token decoder: fusion of token embeddings with a sentence latent, a linear
//! head over the vocabulary, class-constrained training through soft
//! samples, and end-to-end transfer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{clip, extra_usize, SoftTokenSequence, StyleClassifier};
use crate::corpus::{Corpus, StyleLabel, TextExample};
use crate::embedder::{apply_mlm_mask_with, embed_masked_text, TokenEmbedder, DEFAULT_MASK_RATE};
use crate::error::{Error, Result};
use crate::latent::{encode_latent, encode_source, LatentContentEncoder, SourceContentEncoder};
use crate::masker::{explain_ids, mask_attributes, Attribution, ExplainConfig, MaskedText, DEFAULT_MU};
use crate::nn::ops::cross_entropy_logits;
use crate::nn::train::{derive_seed, rng_for, train_epochs, ExampleGrad, FINE_TUNE_LR};
use crate::nn::{Checkpoint, CheckpointHeader, EmbeddingMatrix, LatentVector, Linear, Matrix, Params, Scalar, SoftRow, TrainConfig};

const TAG_SHUFFLE: u64 = 0x41;
const TAG_STEP: u64 = 0x42;
const TAG_EXPLAIN: u64 = 0x43;

/// Token rows after fusion with the latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbeddings<T = f32> {
    pub rows: Matrix<T>,
    pub positions: Vec<usize>,
    pub alpha: f64,
}

/// `α·w_i + (1−α)·ẑ` at `positions`, `w_i` elsewhere.
pub fn fuse_embeddings<T: Scalar>(
    w: &EmbeddingMatrix<T>,
    zhat: &LatentVector<T>,
    positions: &[usize],
    alpha: f64,
) -> Result<FusedEmbeddings<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= w.n()) {
        return Err(Error::InvalidArgument(format!("position {p} outside {} rows", w.n())));
    }
    let mut rows = w.values.clone();
    if alpha < 1.0 {
        if zhat.dim() != w.d() {
            return Err(Error::Shape(format!("latent of width {} for rows of width {}", zhat.dim(), w.d())));
        }
        let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
        for &p in positions {
            for (o, &z) in rows.row_mut(p).iter_mut().zip(&zhat.values) {
                *o = a * *o + b * z;
            }
        }
    }
    Ok(FusedEmbeddings { rows, positions: positions.to_vec(), alpha })
}

/// Linear map from fused rows to vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDecoder<T: Scalar = f32> {
    pub head: Linear<T>,
}

impl<T: Scalar> Params<T> for TokenDecoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.head.tensors_named("head")
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.head.tensors_mut()
    }
}

impl<T: Scalar> TokenDecoder<T> {
    /// Starts from the embedder's vocabulary head.
    pub fn from_embedder(e: &TokenEmbedder<T>) -> Self {
        Self { head: e.head.clone() }
    }

    pub fn vocab_size(&self) -> usize {
        self.head.fan_out()
    }
}

/// One row of logits per fused position, in `fused.positions` order.
pub fn decode_token_logits<T: Scalar>(decoder: &TokenDecoder<T>, fused: &FusedEmbeddings<T>) -> Result<Matrix<T>> {
    if decoder.head.fan_in() != fused.rows.cols {
        return Err(Error::Shape(format!(
            "decoder expects width {}, got {}",
            decoder.head.fan_in(),
            fused.rows.cols
        )));
    }
    let v = decoder.vocab_size();
    let mut out = Matrix::zeros(fused.positions.len(), v);
    for (k, &p) in fused.positions.iter().enumerate() {
        out.row_mut(k).copy_from_slice(&decoder.head.forward_vec(fused.rows.row(p)));
    }
    Ok(out)
}

/// `softmax(o / τ)`, evaluated in double precision.
pub fn soft_sample<T: Scalar>(logits: &[T], tau: f64) -> Result<Vec<T>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let m = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| T::of(v / s)).collect())
}

/// The sentence seen by the class constraint: original ids outside the
/// masked positions, soft rows inside.
pub fn soft_sentence<T: Scalar>(ids: &[u32], positions: &[usize], logits: &Matrix<T>, tau: f64) -> Result<SoftTokenSequence<T>> {
    let mut rows: Vec<SoftRow<T>> = ids.iter().map(|&i| SoftRow::Hard(i)).collect();
    for (k, &p) in positions.iter().enumerate() {
        rows[p] = SoftRow::Soft(soft_sample(logits.row(k), tau)?);
    }
    Ok(SoftTokenSequence { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdHyper {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub mask_rate: f64,
    pub train: TrainConfig,
}

impl Default for TdHyper {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            tau: 1.0,
            alpha: 0.5,
            mask_rate: DEFAULT_MASK_RATE,
            train: TrainConfig { lr: FINE_TUNE_LR, ..TrainConfig::default() },
        }
    }
}

impl TdHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} outside (0, 1)", self.mask_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TdLoss {
    pub total: f64,
    pub dec: f64,
    pub acc: f64,
}

/// `(1−γ)·Σ CE(o_k, t_k) + γ·(−log P(neutral | soft sentence))` for one
/// sentence. With γ = 0 the classifier is not evaluated.
pub fn td_loss<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[u32],
    soft: &SoftTokenSequence<T>,
    f: &StyleClassifier<T>,
    gamma: f64,
) -> Result<TdLoss> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows, targets.len())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let dec: f64 = targets
        .iter()
        .enumerate()
        .map(|(k, &t)| cross_entropy_logits(logits.row(k), t as usize).0.as_f64())
        .sum();
    let acc = if gamma > 0.0 {
        -f.predict_style(soft.as_input())?[StyleLabel::Neutral.index()].ln()
    } else {
        0.0
    };
    Ok(TdLoss { total: (1.0 - gamma) * dec + gamma * acc, dec, acc })
}

/// Gradients of the per-sentence objective.
pub struct TdGrad<T: Scalar> {
    pub loss: TdLoss,
    pub grads: TokenDecoder<T>,
    /// Same shape as the fused rows; zero outside masked positions.
    pub d_fused: Matrix<T>,
}

/// Forward and backward of [`td_loss`] through the head, the soft samples,
/// and the frozen classifier's soft-input path.
pub fn td_example_grad<T: Scalar>(
    decoder: &TokenDecoder<T>,
    fused: &FusedEmbeddings<T>,
    ids: &[u32],
    targets: &[u32],
    f: &StyleClassifier<T>,
    gamma: f64,
    tau: f64,
) -> Result<TdGrad<T>> {
    let logits = decode_token_logits(decoder, fused)?;
    let v = decoder.vocab_size();
    let mut dlogits = Matrix::zeros(logits.rows, v);
    let mut dec = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        let (l, d) = cross_entropy_logits(logits.row(k), t as usize);
        dec += l.as_f64();
        let w = T::of(1.0 - gamma);
        for (o, g) in dlogits.row_mut(k).iter_mut().zip(d) {
            *o = w * g;
        }
    }
    let mut acc = 0.0;
    if gamma > 0.0 {
        let soft = soft_sentence(ids, &fused.positions, &logits, tau)?;
        let cg = f.loss_grad(soft.as_input(), StyleLabel::Neutral.index(), None)?;
        acc = cg.loss.as_f64();
        let scale = T::of(gamma / tau);
        for (k, &p) in fused.positions.iter().enumerate() {
            let SoftRow::Soft(prob) = &soft.rows[p] else { unreachable!() };
            let dp = f.encoder.soft_row_grad(cg.d_input.row(p));
            // softmax Jacobian-vector product: p ⊙ (g − ⟨p, g⟩)
            let pg = prob.iter().zip(&dp).fold(T::zero(), |s, (&a, &b)| s + a * b);
            for ((o, &pv), &g) in dlogits.row_mut(k).iter_mut().zip(prob).zip(&dp) {
                *o += scale * pv * (g - pg);
            }
        }
    }
    let mut grads = decoder.zeros_like();
    let mut d_fused = Matrix::zeros(fused.rows.rows, fused.rows.cols);
    for (k, &p) in fused.positions.iter().enumerate() {
        let dx = decoder.head.backward_vec(fused.rows.row(p), dlogits.row(k), &mut grads.head);
        d_fused.row_mut(p).copy_from_slice(&dx);
    }
    Ok(TdGrad { loss: TdLoss { total: (1.0 - gamma) * dec + gamma * acc, dec, acc }, grads, d_fused })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TdReport {
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes a decoder head, initialised from the embedder's head, on
/// neutral sentences with random masks. Fusion uses z from the source
/// encoder.
pub fn train_token_decoder(
    neutral: &Corpus,
    embedder: &TokenEmbedder,
    sce: &SourceContentEncoder,
    f: &StyleClassifier,
    hyper: &TdHyper,
    seed: u64,
) -> Result<(TokenDecoder, TdReport)> {
    hyper.validate()?;
    if neutral.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if let Some(i) = neutral.examples.iter().position(|e| e.label != StyleLabel::Neutral) {
        return Err(Error::InvalidArgument(format!("decoder training example {i} is not neutral")));
    }
    let sums = (embedder.checksum(), sce.checksum(), f.checksum());
    let max_len = embedder.encoder.cfg.max_len;
    let data: Vec<(Vec<u32>, LatentVector)> = neutral
        .examples
        .par_iter()
        .map(|e| {
            let ids = clip(&e.tokens, max_len).to_vec();
            let z = if hyper.alpha < 1.0 { encode_source(sce, &ids)? } else { LatentVector::new(vec![0.0; sce.encoder.d()]) };
            Ok((ids, z))
        })
        .collect::<Result<_>>()?;

    let mut dec = TokenDecoder::from_embedder(embedder);
    let losses = train_epochs(
        &mut dec,
        &data,
        &hyper.train,
        derive_seed(seed, &[TAG_SHUFFLE]),
        |m: &TokenDecoder, ctx, (ids, z)| {
            let mut r = rng_for(seed, &[TAG_STEP, ctx.epoch as u64, ctx.index as u64]);
            let b = apply_mlm_mask_with(ids, hyper.mask_rate, &mut r)?;
            let w = embedder.encoder.embed_tokens(&b.input)?;
            let fused = fuse_embeddings(&w, z, &b.positions, hyper.alpha)?;
            let g = td_example_grad(m, &fused, ids, &b.targets, f, hyper.gamma, hyper.tau)?;
            Ok(ExampleGrad { loss: g.loss.total, weight: 1.0, grads: g.grads })
        },
        |epoch, _, loss| {
            log::info!("token decoder epoch {}: loss {loss:.4}", epoch + 1);
            Ok(())
        },
    )?;
    if (embedder.checksum(), sce.checksum(), f.checksum()) != sums {
        return Err(Error::FrozenModified("decoder auxiliaries".into()));
    }
    Ok((dec, TdReport { epoch_losses: losses }))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Fills the masked positions of `masked` by argmax decoding. `zhat` is
/// required when `alpha < 1`.
pub fn decode_masked(
    masked: &MaskedText,
    embedder: &TokenEmbedder,
    zhat: Option<&LatentVector>,
    decoder: &TokenDecoder,
    alpha: f64,
) -> Result<Vec<u32>> {
    if masked.masked_positions.is_empty() {
        return Ok(masked.original.tokens.clone());
    }
    let w = embed_masked_text(embedder, masked)?;
    let zero;
    let z = match zhat {
        Some(z) => z,
        None if alpha >= 1.0 => {
            zero = LatentVector::new(vec![0.0; w.d()]);
            &zero
        }
        None => return Err(Error::InvalidArgument("fusion with alpha < 1 needs a latent vector".into())),
    };
    let fused = fuse_embeddings(&w, z, &masked.masked_positions, alpha)?;
    let logits = decode_token_logits(decoder, &fused)?;
    let mut out = masked.original.tokens.clone();
    for (k, &p) in masked.masked_positions.iter().enumerate() {
        out[p] = argmax(logits.row(k)) as u32;
    }
    Ok(out)
}

/// Frozen components for transfer. `lce` may be absent when `alpha == 1`.
#[derive(Clone, Copy)]
pub struct TransferModels<'a> {
    pub classifier: &'a StyleClassifier,
    pub embedder: &'a TokenEmbedder,
    pub lce: Option<&'a LatentContentEncoder>,
    pub decoder: &'a TokenDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub mu: f64,
    pub explain: ExplainConfig,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, explain: ExplainConfig::default(), alpha: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOutput {
    pub tokens: Vec<u32>,
    pub masked: MaskedText,
    pub attribution: Attribution,
}

/// Explainer seed for a sentence: depends on its ids, not its corpus position.
pub fn explain_seed(seed: u64, ids: &[u32]) -> u64 {
    let tags: Vec<u64> = std::iter::once(TAG_EXPLAIN).chain(ids.iter().map(|&i| i as u64)).collect();
    derive_seed(seed, &tags)
}

/// Attribution and masking for one sentence.
pub fn mask_sentence(x: &TextExample, f: &StyleClassifier, cfg: &TransferConfig) -> Result<(Attribution, MaskedText)> {
    let ids = clip(&x.tokens, f.encoder.cfg.max_len);
    let x = TextExample { tokens: ids.to_vec(), ..x.clone() };
    let attr = explain_ids(f, &x.tokens, &cfg.explain, explain_seed(cfg.seed, &x.tokens))?;
    let masked = mask_attributes(&attr, &x, cfg.mu)?;
    Ok((attr, masked))
}

/// mask → embed → ẑ → fuse → decode. Unmasked sentences pass through.
pub fn transfer_text(x: &TextExample, models: TransferModels<'_>, cfg: &TransferConfig) -> Result<TransferOutput> {
    let (attribution, masked) = mask_sentence(x, models.classifier, cfg)?;
    let zhat = match (cfg.alpha < 1.0 && !masked.masked_positions.is_empty(), models.lce) {
        (false, _) => None,
        (true, Some(l)) => Some(encode_latent(l, &masked.original.tokens)?),
        (true, None) => return Err(Error::InvalidArgument("alpha < 1 requires a latent encoder".into())),
    };
    let tokens = decode_masked(&masked, models.embedder, zhat.as_ref(), models.decoder, cfg.alpha)?;
    Ok(TransferOutput { tokens, masked, attribution })
}

impl TokenDecoder<f32> {
    pub fn to_checkpoint(&self, role: &str, seed: u64, vocab_hash: &str, hyper: &TdHyper) -> Result<Checkpoint> {
        let mut header = CheckpointHeader {
            role: role.into(),
            config: serde_json::to_value(hyper)?,
            vocab_hash: vocab_hash.into(),
            seed,
            ..Default::default()
        };
        header.extra.insert("d".into(), self.head.fan_in().into());
        header.extra.insert("vocab_size".into(), self.vocab_size().into());
        Ok(Checkpoint::from_params(header, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TdHyper)> {
        let hyper: TdHyper = serde_json::from_value(ck.header.config.clone())?;
        let mut m = Self { head: Linear::zeros(extra_usize(ck, "d")?, extra_usize(ck, "vocab_size")?) };
        ck.load_into(&mut m)?;
        Ok((m, hyper))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ClassifierRole;
    use crate::nn::EncoderConfig;

    fn w2(rows: &[&[f32]]) -> EmbeddingMatrix<f32> {
        EmbeddingMatrix::all_valid(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()))
    }

    #[test]
    fn fusion_arithmetic() {
        let w = w2(&[&[2.0, 0.0], &[5.0, 5.0]]);
        let z = LatentVector::new(vec![0.0, 2.0]);
        let f = fuse_embeddings(&w, &z, &[0], 0.5).unwrap();
        assert_eq!(f.rows.row(0), &[1.0, 1.0]);
        assert_eq!(f.rows.row(1), &[5.0, 5.0]);
        let f0 = fuse_embeddings(&w, &z, &[0, 1], 0.0).unwrap();
        assert_eq!(f0.rows.row(1), &[0.0, 2.0]);
        let f1 = fuse_embeddings(&w, &z, &[0, 1], 1.0).unwrap();
        assert_eq!(f1.rows, w.values);
    }

    #[test]
    fn zero_head_gives_uniform() {
        let dec = TokenDecoder::<f32> { head: Linear::zeros(2, 7) };
        let w = w2(&[&[2.0, 0.0], &[1.0, 3.0]]);
        let fused = fuse_embeddings(&w, &LatentVector::new(vec![0.0, 0.0]), &[1], 1.0).unwrap();
        let l = decode_token_logits(&dec, &fused).unwrap();
        assert_eq!((l.rows, l.cols), (1, 7));
        let p = soft_sample(l.row(0), 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-7));
        let bad = TokenDecoder::<f32> { head: Linear::zeros(3, 7) };
        assert!(decode_token_logits(&bad, &fused).is_err());
    }

    #[test]
    fn low_temperature_sharpens() {
        let p = soft_sample(&[4.6f64, 0.0, 0.0], 0.01).unwrap();
        assert!(p[0] >= 0.99);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(soft_sample(&[1.0f64], 0.0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }

    fn tiny_f() -> StyleClassifier<f64> {
        let cfg = EncoderConfig { d: 4, layers: 1, heads: 2, ffn_width: 8, max_len: 6, dropout: 0.0 };
        StyleClassifier::new(&cfg, 9, ClassifierRole::Pipeline, &mut rng_for(1, &[])).unwrap()
    }

    #[test]
    fn gamma_zero_is_reconstruction_only() {
        let f = tiny_f();
        let dec = TokenDecoder::<f64> { head: Linear::new(4, 9, 0.5, &mut rng_for(2, &[])) };
        let w = EmbeddingMatrix::all_valid(Matrix::randn(3, 4, 1.0, &mut rng_for(3, &[])));
        let fused = fuse_embeddings(&w, &LatentVector::new(vec![0.1; 4]), &[1], 0.5).unwrap();
        let ids = [5u32, 6, 7];
        let g = td_example_grad(&dec, &fused, &ids, &[6], &f, 0.0, 1.0).unwrap();
        assert_eq!(g.loss.acc, 0.0);
        assert_eq!(g.loss.total, g.loss.dec);
        let logits = decode_token_logits(&dec, &fused).unwrap();
        let soft = soft_sentence(&ids, &[1], &logits, 1.0).unwrap();
        let l = td_loss(&logits, &[6], &soft, &f, 0.0).unwrap();
        assert!((l.total - l.dec).abs() < 1e-15);
        // the classifier term must leave the gradient untouched at γ = 0
        let mut other_f = f.clone();
        other_f.head = Linear::new(4, 2, 3.0, &mut rng_for(9, &[]));
        let g2 = td_example_grad(&dec, &fused, &ids, &[6], &other_f, 0.0, 1.0).unwrap();
        assert_eq!(g.grads, g2.grads);
    }

    #[test]
    fn perfect_prediction_has_zero_dec_loss() {
        let f = tiny_f();
        let mut logits = Matrix::filled(1, 9, -1e4f64);
        logits.set(0, 6, 1e4);
        let soft = soft_sentence(&[5, 6, 7], &[1], &logits, 1.0).unwrap();
        let l = td_loss(&logits, &[6], &soft, &f, 0.3).unwrap();
        assert!(l.dec.abs() < 1e-12);
    }

    #[test]
    fn linear_in_gamma() {
        let f = tiny_f();
        let logits = Matrix::randn(2, 9, 1.0, &mut rng_for(4, &[]));
        let soft = soft_sentence(&[5, 6, 7], &[0, 2], &logits, 1.0).unwrap();
        let t = |g| td_loss(&logits, &[5, 7], &soft, &f, g).unwrap().total;
        assert!((t(0.5) - (t(0.0) + t(1.0)) / 2.0).abs() < 1e-9);
    }
}
