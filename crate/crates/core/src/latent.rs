//! Source content encoder (z) and the latent content encoder (ẑ) trained
//! against a frozen bias detector.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{clip, extra_usize, BiasDetector};
use crate::corpus::{Corpus, StyleLabel};
use crate::embedder::{apply_mlm_mask_with, head_loss_backward, MlmBatch, DEFAULT_MASK_RATE};
use crate::error::{Error, Result};
use crate::nn::encoder::INIT_STD;
use crate::nn::ops::{cosine_grad_a, cosine_slices, cross_entropy_logits, mean_rows, mean_rows_backward};
use crate::nn::train::{derive_seed, rng_for, train_epochs, ExampleGrad, FINE_TUNE_LR};
use crate::nn::{
    Checkpoint, CheckpointHeader, Encoder, EncoderConfig, EncoderInput, LatentVector, Linear, Matrix, Params,
    Scalar, TrainConfig,
};

const TAG_INIT: u64 = 0x31;
const TAG_SHUFFLE: u64 = 0x32;
const TAG_STEP: u64 = 0x33;
const TAG_LCE_SHUFFLE: u64 = 0x34;
const TAG_LCE_STEP: u64 = 0x35;

/// Encoder trained with MLM plus pooled style classification.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceContentEncoder<T: Scalar = f32> {
    pub encoder: Encoder<T>,
    pub mlm_head: Linear<T>,
    pub style_head: Linear<T>,
    pub train_fingerprint: String,
}

impl<T: Scalar> SourceContentEncoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(cfg, vocab_size, rng)?;
        let mlm_head = Linear::new(cfg.d, vocab_size, INIT_STD, rng);
        let style_head = Linear::new(cfg.d, 2, INIT_STD, rng);
        Ok(Self { encoder, mlm_head, style_head, train_fingerprint: String::new() })
    }

    /// Returns (masked-token loss sum, style cross-entropy, gradients of their sum).
    pub fn joint_loss_grad(
        &self,
        batch: &MlmBatch,
        label: StyleLabel,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<(T, T, SourceContentEncoder<T>)> {
        let input = EncoderInput::Ids(&batch.input);
        let (h, cache) = self.encoder.forward(input, rng)?;
        let mut g = self.zeros_like();
        let (mlm, mut dh) = head_loss_backward(&self.mlm_head, &h, &batch.positions, &batch.targets, &mut g.mlm_head);
        let pooled = mean_rows(&h);
        let logits = self.style_head.forward_vec(&pooled);
        let (style, dlogits) = cross_entropy_logits(&logits, label.index());
        let dpooled = self.style_head.backward_vec(&pooled, &dlogits, &mut g.style_head);
        dh.add_assign(&mean_rows_backward(&dpooled, h.rows));
        self.encoder.backward(input, &cache, &dh, &mut g.encoder);
        Ok((mlm, style, g))
    }
}

impl<T: Scalar> Params<T> for SourceContentEncoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.encoder.tensors();
        v.extend(self.mlm_head.tensors_named("mlm_head"));
        v.extend(self.style_head.tensors_named("style_head"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.mlm_head.tensors_mut());
        v.extend(self.style_head.tensors_mut());
        v
    }
}

/// Mean-pooled encoder output, inference mode.
pub fn pooled<T: Scalar>(encoder: &Encoder<T>, ids: &[u32]) -> Result<LatentVector<T>> {
    let (h, _) = encoder.forward(EncoderInput::Ids(clip(ids, encoder.cfg.max_len)), None)?;
    Ok(LatentVector::new(mean_rows(&h)))
}

/// z for a sentence.
pub fn encode_source<T: Scalar>(sce: &SourceContentEncoder<T>, ids: &[u32]) -> Result<LatentVector<T>> {
    pooled(&sce.encoder, ids)
}

/// The latent content encoder: an encoder whose pooled output is ẑ.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentContentEncoder<T: Scalar = f32> {
    pub encoder: Encoder<T>,
}

impl<T: Scalar> Params<T> for LatentContentEncoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.encoder.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.encoder.tensors_mut()
    }
}

impl<T: Scalar> LatentContentEncoder<T> {
    /// Copies the encoder weights of `sce`.
    pub fn from_source(sce: &SourceContentEncoder<T>) -> Self {
        Self { encoder: sce.encoder.clone() }
    }
}

/// ẑ for a sentence.
pub fn encode_latent<T: Scalar>(lce: &LatentContentEncoder<T>, ids: &[u32]) -> Result<LatentVector<T>> {
    pooled(&lce.encoder, ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LceHyper {
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for LceHyper {
    fn default() -> Self {
        Self { lambda: 0.5, train: TrainConfig { lr: FINE_TUNE_LR, ..TrainConfig::default() } }
    }
}

impl LceHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LceLoss {
    pub total: f64,
    pub sim: f64,
    pub acc: f64,
}

/// Per-pair objective and its gradient with respect to ẑ.
pub fn lce_example_grad<T: Scalar>(
    zhat: &[T],
    z: &[T],
    detector: &BiasDetector<T>,
    lam: f64,
) -> Result<(LceLoss, Vec<T>)> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArgument(format!("lambda {lam} outside [0, 1]")));
    }
    if zhat.len() != z.len() {
        return Err(Error::Shape(format!("ẑ has {} entries, z has {}", zhat.len(), z.len())));
    }
    let (c, dc) = cosine_grad_a(zhat, z)?;
    let sim = (c - T::one()) * (c - T::one());
    let (acc, _, dacc) = detector.nll_grad(zhat, StyleLabel::Neutral.index())?;
    let (ws, wa) = (T::of(1.0 - lam), T::of(lam));
    let two = T::of(2.0);
    let grad = dc
        .iter()
        .zip(&dacc)
        .map(|(&g_c, &g_a)| ws * two * (c - T::one()) * g_c + wa * g_a)
        .collect();
    let (sim, acc) = (sim.as_f64(), acc.as_f64());
    Ok((LceLoss { total: (1.0 - lam) * sim + lam * acc, sim, acc }, grad))
}

/// Batch-mean similarity and detector terms, combined with weight `lam`.
pub fn lce_loss<T: Scalar>(
    zhat: &[LatentVector<T>],
    z: &[LatentVector<T>],
    detector: &BiasDetector<T>,
    lam: f64,
) -> Result<LceLoss> {
    if zhat.len() != z.len() || zhat.is_empty() {
        return Err(Error::Shape(format!("{} ẑ vectors against {} z vectors", zhat.len(), z.len())));
    }
    let mut acc = LceLoss::default();
    for (a, b) in zhat.iter().zip(z) {
        let (l, _) = lce_example_grad(&a.values, &b.values, detector, lam)?;
        acc.total += l.total;
        acc.sim += l.sim;
        acc.acc += l.acc;
    }
    let n = zhat.len() as f64;
    Ok(LceLoss { total: acc.total / n, sim: acc.sim / n, acc: acc.acc / n })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LceMetrics {
    pub mean_p_neutral: f64,
    pub mean_cos: f64,
    pub loss: LceLoss,
}

/// Detector confidence in the neutral class and similarity to z over a corpus.
pub fn lce_metrics(
    lce: &LatentContentEncoder,
    sce: &SourceContentEncoder,
    detector: &BiasDetector,
    corpus: &Corpus,
    lam: f64,
) -> Result<LceMetrics> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let rows: Vec<(f64, f64, LceLoss)> = corpus
        .examples
        .par_iter()
        .map(|e| {
            let zh = encode_latent(lce, &e.tokens)?;
            let z = encode_source(sce, &e.tokens)?;
            let p = detector.detect_bias(&zh)?[0];
            let c = cosine_slices(&zh.values, &z.values)? as f64;
            let (l, _) = lce_example_grad(&zh.values, &z.values, detector, lam)?;
            Ok((p, c, l))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mut m = LceMetrics::default();
    for (p, c, l) in &rows {
        m.mean_p_neutral += p / n;
        m.mean_cos += c / n;
        m.loss.total += l.total / n;
        m.loss.sim += l.sim / n;
        m.loss.acc += l.acc / n;
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SceReport {
    pub epoch_losses: Vec<f64>,
}

/// Joint MLM and pooled style training over both classes.
pub fn train_source_content_encoder(
    corpus: &Corpus,
    cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(SourceContentEncoder, SceReport)> {
    if corpus.count(StyleLabel::Neutral) == 0 || corpus.count(StyleLabel::Biased) == 0 {
        return Err(Error::SingleClass);
    }
    let mut model = SourceContentEncoder::new(cfg, corpus.vocab.len(), &mut rng_for(seed, &[TAG_INIT]))?;
    model.train_fingerprint = corpus.fingerprint();
    let losses = train_epochs(
        &mut model,
        &corpus.examples,
        tcfg,
        derive_seed(seed, &[TAG_SHUFFLE]),
        |m: &SourceContentEncoder, ctx, e| {
            let mut r = rng_for(seed, &[TAG_STEP, ctx.epoch as u64, ctx.index as u64]);
            let b = apply_mlm_mask_with(clip(&e.tokens, cfg.max_len), DEFAULT_MASK_RATE, &mut r)?;
            let (mlm, style, grads) = m.joint_loss_grad(&b, e.label, Some(&mut r))?;
            Ok(ExampleGrad { loss: (mlm + style) as f64, weight: 1.0, grads })
        },
        |epoch, _, loss| {
            log::info!("source content encoder epoch {}: loss {loss:.4}", epoch + 1);
            Ok(())
        },
    )?;
    Ok((model, SceReport { epoch_losses: losses }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LceReport {
    pub epoch_losses: Vec<f64>,
    pub initial: LceMetrics,
    pub final_metrics: LceMetrics,
}

/// Trains ẑ on biased sentences, starting from the source encoder's weights.
/// `dev` (biased) is used for the before/after metrics. Fails if either
/// frozen model changes during training.
pub fn train_latent_encoder(
    biased: &Corpus,
    dev: &Corpus,
    sce: &SourceContentEncoder,
    detector: &BiasDetector,
    hyper: &LceHyper,
    seed: u64,
) -> Result<(LatentContentEncoder, LceReport)> {
    hyper.validate()?;
    if biased.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if biased.examples.iter().any(|e| e.label != StyleLabel::Biased) {
        return Err(Error::InvalidArgument("latent encoder trains on biased examples only".into()));
    }
    let sce_sum = sce.checksum();
    let det_sum = detector.checksum();
    let lam = hyper.lambda;
    let max_len = sce.encoder.cfg.max_len;
    let targets: Vec<(Vec<u32>, Vec<f32>)> = biased
        .examples
        .par_iter()
        .map(|e| {
            let ids = clip(&e.tokens, max_len).to_vec();
            let z = encode_source(sce, &ids)?.values;
            Ok((ids, z))
        })
        .collect::<Result<_>>()?;

    let mut lce = LatentContentEncoder::from_source(sce);
    let initial = lce_metrics(&lce, sce, detector, dev, lam)?;
    let losses = train_epochs(
        &mut lce,
        &targets,
        &hyper.train,
        derive_seed(seed, &[TAG_LCE_SHUFFLE]),
        |m: &LatentContentEncoder, ctx, (ids, z)| {
            let mut r = rng_for(seed, &[TAG_LCE_STEP, ctx.epoch as u64, ctx.index as u64]);
            let input = EncoderInput::Ids(ids);
            let (h, cache) = m.encoder.forward(input, Some(&mut r))?;
            let zhat = mean_rows(&h);
            let (l, dz) = lce_example_grad(&zhat, z, detector, lam)?;
            let mut g = m.zeros_like();
            m.encoder.backward(input, &cache, &mean_rows_backward(&dz, h.rows), &mut g.encoder);
            Ok(ExampleGrad { loss: l.total, weight: 1.0, grads: g })
        },
        |epoch, _, loss| {
            log::info!("latent encoder epoch {}: loss {loss:.4}", epoch + 1);
            Ok(())
        },
    )?;
    if sce.checksum() != sce_sum {
        return Err(Error::FrozenModified("source content encoder".into()));
    }
    if detector.checksum() != det_sum {
        return Err(Error::FrozenModified("bias detector".into()));
    }
    let final_metrics = lce_metrics(&lce, sce, detector, dev, lam)?;
    Ok((lce, LceReport { epoch_losses: losses, initial, final_metrics }))
}

fn encoder_header(role: &str, enc: &Encoder<f32>, seed: u64, vocab_hash: &str) -> Result<CheckpointHeader> {
    let mut h = CheckpointHeader {
        role: role.into(),
        config: serde_json::to_value(&enc.cfg)?,
        vocab_hash: vocab_hash.into(),
        seed,
        ..Default::default()
    };
    h.extra.insert("vocab_size".into(), enc.vocab_size.into());
    Ok(h)
}

fn expect_role(ck: &Checkpoint, role: &str) -> Result<EncoderConfig> {
    if ck.header.role != role {
        return Err(Error::Checkpoint(format!("expected {role}, found `{}`", ck.header.role)));
    }
    Ok(serde_json::from_value(ck.header.config.clone())?)
}

impl SourceContentEncoder<f32> {
    pub fn to_checkpoint(&self, seed: u64, vocab_hash: &str) -> Result<Checkpoint> {
        let mut h = encoder_header("source_content_encoder", &self.encoder, seed, vocab_hash)?;
        h.extra.insert("train_fingerprint".into(), self.train_fingerprint.clone().into());
        Ok(Checkpoint::from_params(h, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = expect_role(ck, "source_content_encoder")?;
        let mut m = Self::new(&cfg, extra_usize(ck, "vocab_size")?, &mut rng_for(0, &[]))?;
        ck.load_into(&mut m)?;
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

impl LatentContentEncoder<f32> {
    pub fn to_checkpoint(&self, seed: u64, vocab_hash: &str, lambda: f64) -> Result<Checkpoint> {
        let mut h = encoder_header("latent_encoder", &self.encoder, seed, vocab_hash)?;
        h.extra.insert("lambda".into(), lambda.into());
        Ok(Checkpoint::from_params(h, self))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = expect_role(ck, "latent_encoder")?;
        let mut m = Self { encoder: Encoder::new(&cfg, extra_usize(ck, "vocab_size")?, &mut rng_for(0, &[]))? };
        ck.load_into(&mut m)?;
        Ok(m)
    }
}
