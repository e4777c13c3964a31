use rand::Rng;
use serde::{Deserialize, Serialize};

use super::style::{extra_usize, probs2};
use crate::corpus::StyleLabel;
use crate::error::{Error, Result};
use crate::nn::encoder::INIT_STD;
use crate::nn::ops::cross_entropy_logits;
use crate::nn::train::{apply_update, batch_gradients, derive_seed, rng_for, shuffled_indices};
use crate::nn::{Adam, Checkpoint, CheckpointHeader, LatentVector, Linear, Matrix, Params, Scalar, TrainConfig};

pub const DEFAULT_DETECTOR_HIDDEN: usize = 64;

const TAG_INIT: u64 = 0x11;
const TAG_SPLIT: u64 = 0x12;
const TAG_SHUFFLE: u64 = 0x13;

/// `d → h → 2` with tanh, applied to a pooled latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasDetector<T: Scalar = f32> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

impl<T: Scalar> BiasDetector<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let std1 = (1.0 / d as f64).sqrt();
        Self {
            l1: Linear::new(d, hidden, std1, rng),
            l2: Linear::new(hidden, 2, INIT_STD.max((1.0 / hidden as f64).sqrt()), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.l1.fan_in()
    }

    fn check(&self, z: &[T]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!("latent of length {} for detector of width {}", z.len(), self.dim())));
        }
        Ok(())
    }

    fn forward(&self, z: &[T]) -> (Vec<T>, Vec<T>) {
        let a: Vec<T> = self.l1.forward_vec(z).into_iter().map(|v| v.tanh()).collect();
        let logits = self.l2.forward_vec(&a);
        (a, logits)
    }

    pub fn logits(&self, z: &[T]) -> Result<Vec<T>> {
        self.check(z)?;
        Ok(self.forward(z).1)
    }

    /// (P(neutral | ẑ), P(biased | ẑ)).
    pub fn detect_bias(&self, z: &LatentVector<T>) -> Result<[f64; 2]> {
        Ok(probs2(&self.logits(&z.values)?))
    }

    /// `−log P(target | z)` with gradients for the parameters and for `z`.
    pub fn nll_grad(&self, z: &[T], target: usize) -> Result<(T, BiasDetector<T>, Vec<T>)> {
        self.check(z)?;
        let (a, logits) = self.forward(z);
        let (loss, dlogits) = cross_entropy_logits(&logits, target);
        let mut g = self.zeros_like();
        let da = self.l2.backward_vec(&a, &dlogits, &mut g.l2);
        let du: Vec<T> = da.iter().zip(&a).map(|(&d, &av)| d * (T::one() - av * av)).collect();
        let dz = self.l1.backward_vec(z, &du, &mut g.l1);
        Ok((loss, g, dz))
    }
}

impl<T: Scalar> Params<T> for BiasDetector<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.l1.tensors_named("l1");
        v.extend(self.l2.tensors_named("l2"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.l2.tensors_mut());
        v
    }
}

impl BiasDetector<f32> {
    pub fn to_checkpoint(&self, seed: u64, vocab_hash: &str) -> Checkpoint {
        let mut header = CheckpointHeader {
            role: "bias_detector".into(),
            config: serde_json::json!({ "d": self.dim(), "hidden": self.l1.fan_out() }),
            vocab_hash: vocab_hash.into(),
            seed,
            ..Default::default()
        };
        header.extra.insert("d".into(), self.dim().into());
        header.extra.insert("hidden".into(), self.l1.fan_out().into());
        Checkpoint::from_params(header, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.role != "bias_detector" {
            return Err(Error::Checkpoint(format!("expected bias_detector, found `{}`", ck.header.role)));
        }
        let mut m = Self::new(extra_usize(ck, "d")?, extra_usize(ck, "hidden")?, &mut rng_for(0, &[]));
        ck.load_into(&mut m)?;
        Ok(m)
    }
}

/// Defaults for detector training: the model is tiny, so more epochs and a
/// larger step than the encoders.
pub fn detector_train_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, batch_size: 32, epochs: 40, clip_norm: Some(1.0) }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DetectorReport {
    pub train_size: usize,
    pub dev_size: usize,
    pub dev_accuracy: f64,
    pub best_epoch: usize,
}

pub fn detector_accuracy(det: &BiasDetector, data: &[(LatentVector, StyleLabel)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let mut hits = 0usize;
    for (z, l) in data {
        let p = det.detect_bias(z)?;
        if (p[1] > p[0]) == (*l == StyleLabel::Biased) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains on 90% of `latents` (seeded split) and keeps the epoch with the best
/// accuracy on the remaining 10%.
pub fn train_bias_detector(
    latents: &[(LatentVector, StyleLabel)],
    hidden: usize,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(BiasDetector, DetectorReport)> {
    let first = latents.first().ok_or(Error::SingleClass)?;
    if !latents.iter().any(|(_, l)| *l != first.1) {
        return Err(Error::SingleClass);
    }
    let d = first.0.dim();
    if let Some((z, _)) = latents.iter().find(|(z, _)| z.dim() != d) {
        return Err(Error::Shape(format!("mixed latent widths {d} and {}", z.dim())));
    }
    let order = shuffled_indices(latents.len(), derive_seed(seed, &[TAG_SPLIT]), 0);
    let n_dev = (latents.len() / 10).max(1).min(latents.len() - 1);
    let dev: Vec<_> = order[..n_dev].iter().map(|&i| latents[i].clone()).collect();
    let train: Vec<_> = order[n_dev..].iter().map(|&i| latents[i].clone()).collect();

    let mut det = BiasDetector::new(d, hidden, &mut rng_for(seed, &[TAG_INIT]));
    let mut opt = Adam::new(&det);
    let mut best = (detector_accuracy(&det, &dev)?, det.clone(), 0);
    let shuffle_seed = derive_seed(seed, &[TAG_SHUFFLE]);
    for epoch in 0..tcfg.epochs {
        let idx = shuffled_indices(train.len(), shuffle_seed, epoch);
        for chunk in idx.chunks(tcfg.batch_size.max(1)) {
            let m = &det;
            let (_, g) = batch_gradients(chunk, |_, &i| {
                let (z, l) = &train[i];
                let (loss, g, _) = m.nll_grad(&z.values, l.index())?;
                Ok((loss as f64, g))
            })?
            .expect("non-empty batch");
            apply_update(&mut det, &mut opt, g, chunk.len(), tcfg)?;
        }
        let acc = detector_accuracy(&det, &dev)?;
        if acc > best.0 {
            best = (acc, det.clone(), epoch + 1);
        }
    }
    let report = DetectorReport {
        train_size: train.len(),
        dev_size: dev.len(),
        dev_accuracy: best.0,
        best_epoch: best.2,
    };
    log::info!("bias detector dev accuracy {:.4} (epoch {})", report.dev_accuracy, report.best_epoch);
    Ok((best.1, report))
}
