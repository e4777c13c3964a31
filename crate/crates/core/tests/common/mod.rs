//! Shared fixtures for the integration tests: micro models for gradient
//! checks, the linear bag-of-words explainer oracle, a seeded end-to-end run
//! cached under the cargo target dir, and acceptance thresholds.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use debias_core::classifiers::{BiasDetector, ClassifierRole, StyleClassifier, StyleScorer};
use debias_core::corpus::{synthesize_corpus, synthesize_splits, Lexicon, StyleLabel, MASK};
use debias_core::decoder::{decode_token_logits, soft_sentence, td_example_grad, td_loss, FusedEmbeddings, TokenDecoder};
use debias_core::embedder::{MlmBatch, TokenEmbedder};
use debias_core::latent::{lce_example_grad, pooled, LatentContentEncoder, SourceContentEncoder};
use debias_core::masker::{explain_ids, kernel_weight, weighted_ridge, ExplainConfig};
use debias_core::nn::gradcheck::{check_params, check_vector, GradCheck};
use debias_core::nn::{Encoder, EncoderConfig, EncoderInput, Matrix, Params, SoftRow};
use debias_core::pipeline::{train_models, CheckpointStore, Models, RunConfig, Splits, StageMode};
use debias_core::stats::spearman;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------- thresholds

pub fn thresholds() -> &'static toml::Table {
    static T: OnceLock<toml::Table> = OnceLock::new();
    T.get_or_init(|| {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../Cargo.toml");
        let doc: toml::Table = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        doc["workspace"]["metadata"]["acceptance"].as_table().unwrap().clone()
    })
}

pub fn th(key: &str) -> f64 {
    match &thresholds()[key] {
        toml::Value::Float(f) => *f,
        toml::Value::Integer(i) => *i as f64,
        v => panic!("threshold {key} is not a number: {v}"),
    }
}

// ---------------------------------------------------------------- gradients

const V: usize = 13;

pub fn micro_cfg() -> EncoderConfig {
    EncoderConfig { d: 8, layers: 1, heads: 2, ffn_width: 16, max_len: 6, dropout: 0.0 }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(n: usize, seed: u64) -> Vec<f64> {
    let mut v: Vec<f64> = Matrix::<f64>::randn(1, n, 1.0, &mut rng(seed)).data.iter().map(|x| x.exp()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn named(prefix: &str, mut r: Vec<GradCheck>) -> Vec<GradCheck> {
    for g in &mut r {
        g.name = format!("{prefix}.{}", g.name);
    }
    r
}

/// Style cross-entropy over the encoder, head, and a soft input row.
pub fn grad_style_classifier() -> Vec<GradCheck> {
    let f = StyleClassifier::<f64>::new(&micro_cfg(), V, ClassifierRole::Pipeline, &mut rng(1)).unwrap();
    let ids = [5u32, 9, 7, 11];
    let g = f.loss_grad(EncoderInput::Ids(&ids), 1, None).unwrap();
    let mut out = named(
        "style_ce",
        check_params(&f, &g.grads, |m| m.loss_grad(EncoderInput::Ids(&ids), 1, None).unwrap().loss),
    );

    let p0 = simplex(V, 2);
    let rows_of = |p: &[f64]| vec![SoftRow::Hard(5), SoftRow::Soft(p.to_vec()), SoftRow::Hard(7)];
    let rows = rows_of(&p0);
    let g = f.loss_grad(EncoderInput::Rows(&rows), 0, None).unwrap();
    let dp = f.encoder.soft_row_grad(g.d_input.row(1));
    out.push(check_vector("style_ce.soft_row", &p0, &dp, |p| {
        f.loss_grad(EncoderInput::Rows(&rows_of(p)), 0, None).unwrap().loss
    }));
    out
}

/// Detector negative log-likelihood over its weights and the latent input.
pub fn grad_detector() -> Vec<GradCheck> {
    let det = BiasDetector::<f64>::new(8, 6, &mut rng(3));
    let z = Matrix::<f64>::randn(1, 8, 1.0, &mut rng(4)).data;
    let mut out = Vec::new();
    for target in [0, 1] {
        let (_, g, dz) = det.nll_grad(&z, target).unwrap();
        out.extend(named("detector", check_params(&det, &g, |d| d.nll_grad(&z, target).unwrap().0)));
        out.push(check_vector("detector.z", &z, &dz, |z| det.nll_grad(z, target).unwrap().0));
    }
    out
}

fn micro_batch() -> MlmBatch {
    MlmBatch { input: vec![5, MASK, 7, MASK, 10], positions: vec![1, 3], targets: vec![9, 6] }
}

/// Summed masked-token cross-entropy of the token embedder.
pub fn grad_mlm() -> Vec<GradCheck> {
    let e = TokenEmbedder::<f64>::new(&micro_cfg(), V, &mut rng(5)).unwrap();
    let b = micro_batch();
    let (_, g) = e.mlm_loss_grad(&b, None).unwrap();
    named("mlm", check_params(&e, &g, |m| m.mlm_loss(&b).unwrap()))
}

/// Joint masked-token and pooled style loss of the source content encoder.
pub fn grad_source_encoder() -> Vec<GradCheck> {
    let s = SourceContentEncoder::<f64>::new(&micro_cfg(), V, &mut rng(6)).unwrap();
    let b = micro_batch();
    let mut out = Vec::new();
    for label in StyleLabel::ALL {
        let (_, _, g) = s.joint_loss_grad(&b, label, None).unwrap();
        out.extend(named(
            "sce",
            check_params(&s, &g, |m| {
                let (a, c, _) = m.joint_loss_grad(&b, label, None).unwrap();
                a + c
            }),
        ));
    }
    out
}

/// Latent objective with respect to ẑ, and back through the encoder that pools it.
pub fn grad_latent() -> Vec<GradCheck> {
    let det = BiasDetector::<f64>::new(8, 6, &mut rng(7));
    let z = Matrix::<f64>::randn(1, 8, 1.0, &mut rng(8)).data;
    let zhat = Matrix::<f64>::randn(1, 8, 1.0, &mut rng(9)).data;
    let mut out = Vec::new();
    for lam in [0.0, 0.5, 1.0] {
        let (_, dz) = lce_example_grad(&zhat, &z, &det, lam).unwrap();
        out.push(check_vector(&format!("lce[{lam}].zhat"), &zhat, &dz, |x| {
            lce_example_grad(x, &z, &det, lam).unwrap().0.total
        }));
    }

    let lce = LatentContentEncoder { encoder: Encoder::<f64>::new(&micro_cfg(), V, &mut rng(10)).unwrap() };
    let ids = [5u32, 8, 6, 12];
    let lam = 0.5;
    let zh = pooled(&lce.encoder, &ids).unwrap().values;
    let (_, dz) = lce_example_grad(&zh, &z, &det, lam).unwrap();
    let n = ids.len();
    let dh = Matrix::from_vec(n, 8, (0..n).flat_map(|_| dz.iter().map(|v| v / n as f64)).collect());
    let (_, cache) = lce.encoder.forward(EncoderInput::Ids(&ids), None).unwrap();
    let mut g = lce.zeros_like();
    lce.encoder.backward(EncoderInput::Ids(&ids), &cache, &dh, &mut g.encoder);
    out.extend(named(
        "lce",
        check_params(&lce, &g, |m| {
            let zh = pooled(&m.encoder, &ids).unwrap().values;
            lce_example_grad(&zh, &z, &det, lam).unwrap().0.total
        }),
    ));
    out
}

/// Decoder objective over the head and the fused rows, including the
/// soft-sampled path through the frozen classifier.
pub fn grad_decoder() -> Vec<GradCheck> {
    let cfg = micro_cfg();
    let e = TokenEmbedder::<f64>::new(&cfg, V, &mut rng(11)).unwrap();
    let dec = TokenDecoder::from_embedder(&e);
    let f = StyleClassifier::<f64>::new(&cfg, V, ClassifierRole::Pipeline, &mut rng(12)).unwrap();
    let ids = [5u32, MASK, 7, MASK];
    let positions = vec![1, 3];
    let targets = [8u32, 6];
    let fused = FusedEmbeddings { rows: Matrix::randn(4, 8, 1.0, &mut rng(13)), positions: positions.clone(), alpha: 0.5 };
    let total = |d: &TokenDecoder<f64>, fz: &FusedEmbeddings<f64>, gamma: f64, tau: f64| {
        let logits = decode_token_logits(d, fz).unwrap();
        let soft = soft_sentence(&ids, &fz.positions, &logits, tau).unwrap();
        td_loss(&logits, &targets, &soft, &f, gamma).unwrap().total
    };
    let mut out = Vec::new();
    for (gamma, tau) in [(0.0, 1.0), (0.3, 1.0), (1.0, 1.0), (0.3, 0.5)] {
        let g = td_example_grad(&dec, &fused, &ids, &targets, &f, gamma, tau).unwrap();
        out.extend(named(
            &format!("td[{gamma},{tau}]"),
            check_params(&dec, &g.grads, |d| total(d, &fused, gamma, tau)),
        ));
        out.push(check_vector(&format!("td[{gamma},{tau}].fused"), &fused.rows.data, &g.d_fused.data, |x| {
            let fz = FusedEmbeddings { rows: Matrix::from_vec(4, 8, x.to_vec()), ..fused.clone() };
            total(&dec, &fz, gamma, tau)
        }));
    }
    out
}

pub fn gradient_suite() -> Vec<GradCheck> {
    let mut all = Vec::new();
    all.extend(grad_style_classifier());
    all.extend(grad_detector());
    all.extend(grad_mlm());
    all.extend(grad_source_encoder());
    all.extend(grad_latent());
    all.extend(grad_decoder());
    all
}

pub fn worst(r: &[GradCheck]) -> (f64, String) {
    r.iter()
        .map(|g| (g.max_rel_err, g.name.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 || !b.0.is_finite() { b } else { a })
}

// ---------------------------------------------------------------- explainer oracle

/// `P(biased) = σ(b + Σ c_w)` over the tokens present.
pub struct LinearBow {
    pub coef: Vec<f64>,
    pub bias: f64,
}

impl StyleScorer for LinearBow {
    fn score(&self, ids: &[u32]) -> debias_core::Result<[f64; 2]> {
        let s = self.bias + ids.iter().map(|&i| self.coef[i as usize]).sum::<f64>();
        let p = 1.0 / (1.0 + (-s).exp());
        Ok([1.0 - p, p])
    }
}

pub struct OracleSuite {
    pub model: LinearBow,
    pub sentences: Vec<Vec<u32>>,
}

pub fn oracle_suite(n: usize, max_tokens: usize, seed: u64) -> OracleSuite {
    let corpus = synthesize_corpus(seed, 4 * n, &Lexicon::builtin()).unwrap();
    let mut sentences: Vec<Vec<u32>> = Vec::new();
    for e in &corpus.examples {
        if e.tokens.len() <= max_tokens && !sentences.contains(&e.tokens) {
            sentences.push(e.tokens.clone());
        }
        if sentences.len() == n {
            break;
        }
    }
    assert_eq!(sentences.len(), n, "not enough short sentences");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut r = rng(seed ^ 0xB0B);
    let coef = (0..corpus.vocab.len()).map(|_| normal.sample(&mut r)).collect();
    OracleSuite { model: LinearBow { coef, bias: 0.0 }, sentences }
}

impl OracleSuite {
    pub fn true_coefficients(&self, ids: &[u32]) -> Vec<f64> {
        ids.iter().map(|&i| self.model.coef[i as usize]).collect()
    }

    pub fn sampled(&self, i: usize, n_samples: usize) -> Vec<f64> {
        let cfg = ExplainConfig { n_samples, ..ExplainConfig::default() };
        explain_ids(&self.model, &self.sentences[i], &cfg, 1000 + i as u64).unwrap().weights
    }

    /// Spearman correlation of sampled attributions with the true
    /// coefficients, one value per sentence.
    pub fn spearman_to_truth(&self, n_samples: usize) -> Vec<f64> {
        (0..self.sentences.len())
            .map(|i| spearman(&self.sampled(i, n_samples), &self.true_coefficients(&self.sentences[i])).unwrap_or(0.0))
            .collect()
    }

    /// Surrogate fitted on every non-empty perturbation, weighted by the
    /// kernel times the chance of drawing it among `n_samples` draws.
    pub fn exact(&self, i: usize, n_samples: usize) -> Vec<f64> {
        let ids = &self.sentences[i];
        let n = ids.len();
        let cfg = ExplainConfig::default();
        let total = (1u64 << n) - 1;
        let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for bits in 1..=total {
            let keep: Vec<bool> = (0..n).map(|j| bits >> j & 1 == 1).collect();
            let kept: Vec<u32> = ids.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect();
            x.push(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
            y.push(self.model.score(&kept).unwrap()[1]);
            let k = keep.iter().filter(|&&b| b).count();
            w.push(kernel_weight(k, n, cfg.kernel_scale) * n_samples as f64 / total as f64);
        }
        weighted_ridge(&x, &y, &w, cfg.ridge).unwrap().0
    }
}

// ---------------------------------------------------------------- end-to-end run

pub struct E2e {
    pub cfg: RunConfig,
    pub data: Splits,
    pub models: Models,
    /// Wall time of `train_models` in this process.
    pub train_secs: f64,
    pub dir: PathBuf,
}

/// Default configuration at the calibration seed. Checkpoints live under the
/// cargo target dir so later test binaries reuse them; `fresh` wipes them
/// first. The first call in a process decides.
pub fn e2e(fresh: bool) -> &'static E2e {
    static RUN: OnceLock<E2e> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.seed = th("e2e_seed") as u64;
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("e2e-seed{}", cfg.seed));
        if fresh && dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        let d = &cfg.data;
        let data: Splits = synthesize_splits(cfg.seed, d.n_train, d.n_dev, d.n_test, &Lexicon::builtin()).unwrap().into();
        let t0 = Instant::now();
        let models = train_models(&cfg, &data, &CheckpointStore::at(&dir, StageMode::Train)).unwrap();
        E2e { cfg, data, models, train_secs: t0.elapsed().as_secs_f64(), dir }
    })
}

impl E2e {
    pub fn report(&self, stage: &str) -> &serde_json::Value {
        &self.models.manifests.iter().find(|m| m.stage == stage).unwrap().report
    }

    pub fn neutral_ids(&self) -> Vec<u32> {
        debias_core::pipeline::neutral_ids(&Lexicon::builtin(), self.data.vocab())
    }
}

// ---------------------------------------------------------------- probes

/// Plain logistic regression by full-batch gradient descent on standardized
/// features. Returns accuracy on the test rows.
pub fn logistic_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let p = train[0].0.len();
    let n = train.len() as f64;
    let mu: Vec<f64> = (0..p).map(|j| train.iter().map(|r| r.0[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..p)
        .map(|j| (train.iter().map(|r| (r.0[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let std = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect() };
    let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (std(x), *y as f64)).collect();
    let (mut w, mut b) = (vec![0.0; p], 0.0);
    for _ in 0..300 {
        let mut gw = vec![0.0; p];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let s = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let d = 1.0 / (1.0 + (-s).exp()) - y;
            gb += d;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
        }
        b -= 0.5 * gb / n;
        w.iter_mut().zip(&gw).for_each(|(c, g)| *c -= 0.5 * (g / n + 1e-3 * *c));
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let s = b + std(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) as usize == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Bag-of-words count features.
pub fn bow(ids: &[u32], v: usize) -> Vec<f64> {
    let mut x = vec![0.0; v];
    for &i in ids {
        x[i as usize] += 1.0;
    }
    x
}
