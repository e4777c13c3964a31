//! Shared minibatch machinery: seeded streams, shuffling, parallel per-example
//! gradients reduced in a fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam};
use super::params::{sum_in_order, Params};
use super::tensor::Scalar;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: Option<f64>,
}

/// Step size for stages that start from already-trained weights.
pub const FINE_TUNE_LR: f64 = 5e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            epochs: 4,
            clip_norm: Some(1.0),
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[0x5348_5546, epoch as u64]));
    idx
}

/// Runs `per_example` over a batch in parallel and sums losses and gradients
/// in batch order.
pub fn batch_gradients<T, P, E, F>(batch: &[E], per_example: F) -> Result<Option<(f64, P)>>
where
    T: Scalar,
    P: Params<T>,
    E: Sync,
    F: Fn(usize, &E) -> Result<(f64, P)> + Sync + Send,
{
    let parts: Vec<(f64, P)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, e)| per_example(i, e))
        .collect::<Result<Vec<_>>>()?;
    let loss: f64 = parts.iter().map(|(l, _)| *l).sum();
    Ok(sum_in_order(parts.into_iter().map(|(_, g)| g).collect()).map(|g| (loss, g)))
}

/// Averages `grads` over `batch_len`, clips, and applies one optimizer step.
pub fn apply_update<T: Scalar, P: Params<T>>(
    params: &mut P,
    opt: &mut Adam<T>,
    mut grads: P,
    batch_len: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    grads.scale(T::of(1.0 / batch_len as f64));
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    opt.step(params, &grads, cfg.lr)
}

#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    pub epoch: usize,
    pub step: u64,
    /// Index of the example in the training slice.
    pub index: usize,
}

/// One example's contribution: loss, a reporting weight (e.g. number of
/// predicted tokens), and parameter gradients.
pub struct ExampleGrad<P> {
    pub loss: f64,
    pub weight: f64,
    pub grads: P,
}

/// Shuffled minibatch training. `per_example` runs in parallel and its
/// results are reduced in batch order. Returns the weighted mean loss per
/// epoch; `on_epoch` sees the parameters after each epoch.
pub fn train_epochs<T, P, E, F, C>(
    params: &mut P,
    examples: &[E],
    tcfg: &TrainConfig,
    shuffle_seed: u64,
    per_example: F,
    mut on_epoch: C,
) -> Result<Vec<f64>>
where
    T: Scalar,
    P: Params<T>,
    E: Sync,
    F: Fn(&P, StepCtx, &E) -> Result<ExampleGrad<P>> + Sync,
    C: FnMut(usize, &P, f64) -> Result<()>,
{
    if tcfg.batch_size == 0 {
        return Err(crate::Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut opt = Adam::new(params);
    let mut losses = Vec::with_capacity(tcfg.epochs);
    let mut step = 0u64;
    for epoch in 0..tcfg.epochs {
        let order = shuffled_indices(examples.len(), shuffle_seed, epoch);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for chunk in order.chunks(tcfg.batch_size) {
            let p: &P = params;
            let parts: Vec<ExampleGrad<P>> = chunk
                .par_iter()
                .map(|&i| per_example(p, StepCtx { epoch, step, index: i }, &examples[i]))
                .collect::<Result<_>>()?;
            for e in &parts {
                loss_sum += e.loss;
                weight_sum += e.weight;
            }
            let grads = sum_in_order(parts.into_iter().map(|e| e.grads).collect()).expect("non-empty chunk");
            apply_update(params, &mut opt, grads, chunk.len(), tcfg)?;
            step += 1;
        }
        let mean = if weight_sum > 0.0 { loss_sum / weight_sum } else { 0.0 };
        losses.push(mean);
        on_epoch(epoch, params, mean)?;
    }
    Ok(losses)
}
