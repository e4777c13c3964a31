//! Staged training of every component, transfer over a corpus, and the
//! evaluation table with ablation rows.

mod config;
mod data;
mod store;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{AblationFlags, DataConfig, DetectorConfig, EvalConfig, MaskerConfig, PathsConfig, RunConfig};
pub use data::{load_splits, neutral_ids, write_splits, Splits};
pub use store::{CheckpointStore, StageKey, StageManifest, StageMode};

use crate::classifiers::{
    classifier_accuracy, train_bias_detector, train_style_classifier, BiasDetector, ClassifierRole, StyleClassifier,
};
use crate::corpus::{StyleLabel, TextExample};
use crate::decoder::{
    decode_masked, mask_sentence, train_token_decoder, TdHyper, TokenDecoder, TransferConfig, TransferOutput,
};
use crate::embedder::{train_token_embedder, TokenEmbedder};
use crate::error::Result;
use crate::eval::{gold_replacement_rate, score_outputs, train_kn_lm, EvalModels, MetricsReport, NgramModel};
use crate::latent::{
    encode_latent, encode_source, train_latent_encoder, train_source_content_encoder, LatentContentEncoder,
    SourceContentEncoder,
};
use crate::masker::{Attribution, MaskedText};
use crate::nn::train::derive_seed;
use crate::nn::LatentVector;

/// Decoder variants: the full model and the two ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// α = 1: no latent vector at decode time.
    NoLatent,
    /// α = 1 and γ = 0: no latent vector and no classifier term in training.
    NoLatentNoConstraint,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoLatent, Variant::NoLatentNoConstraint];

    pub fn from_flags(f: AblationFlags) -> Self {
        match (f.no_latent, f.no_class_constraint) {
            (false, _) => Variant::Full,
            (true, false) => Variant::NoLatent,
            (true, true) => Variant::NoLatentNoConstraint,
        }
    }

    pub fn stage(self) -> &'static str {
        match self {
            Variant::Full => "decoder",
            Variant::NoLatent => "decoder_no_latent",
            Variant::NoLatentNoConstraint => "decoder_no_latent_no_constraint",
        }
    }

    /// Decoder hyper-parameters for this variant.
    pub fn hyper(self, base: &TdHyper) -> TdHyper {
        match self {
            Variant::Full => base.clone(),
            Variant::NoLatent => TdHyper { alpha: 1.0, ..base.clone() },
            Variant::NoLatentNoConstraint => TdHyper { alpha: 1.0, gamma: 0.0, ..base.clone() },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoLatent => "no-latent",
            Variant::NoLatentNoConstraint => "no-latent-no-constraint",
        })
    }
}

// stage seed tags
const TAG_CLASSIFIER: u64 = 1;
const TAG_SOURCE: u64 = 2;
const TAG_DETECTOR: u64 = 3;
const TAG_EMBEDDER: u64 = 4;
const TAG_LATENT: u64 = 5;
const TAG_DECODER: u64 = 6;
const TAG_EVAL_CLASSIFIER: u64 = 7;
const TAG_EVAL_ENCODER: u64 = 8;
const TAG_TRANSFER: u64 = 9;

/// Every trained component plus the stage manifests.
pub struct Models {
    pub classifier: StyleClassifier,
    pub source_encoder: SourceContentEncoder,
    pub detector: BiasDetector,
    pub embedder: TokenEmbedder,
    pub latent_encoder: LatentContentEncoder,
    pub decoders: BTreeMap<Variant, (TokenDecoder, TdHyper)>,
    pub eval_classifier: StyleClassifier,
    pub eval_encoder: TokenEmbedder,
    pub lm: NgramModel,
    pub manifests: Vec<StageManifest>,
}

impl Models {
    pub fn checkpoint_hashes(&self) -> BTreeMap<String, String> {
        self.manifests.iter().map(|m| (m.stage.clone(), m.checkpoint_sha256.clone())).collect()
    }

    pub fn transfer_config(&self, cfg: &RunConfig, variant: Variant) -> TransferConfig {
        TransferConfig {
            mu: cfg.masker.mu,
            explain: cfg.masker.explain(),
            alpha: self.decoders[&variant].1.alpha,
            seed: derive_seed(cfg.seed, &[TAG_TRANSFER]),
        }
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

/// Trains (or reuses) every stage in dependency order.
pub fn train_models(cfg: &RunConfig, data: &Splits, store: &CheckpointStore) -> Result<Models> {
    cfg.validate()?;
    let seed = |tag| derive_seed(cfg.seed, &[tag]);
    let vh = data.vocab().hash();
    let data_fp = format!("{}:{}", data.train.fingerprint(), data.dev.fingerprint());
    let mut manifests = Vec::new();

    let s = seed(TAG_CLASSIFIER);
    let key = StageKey {
        name: "style_classifier",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&(&cfg.encoder, &cfg.classifier)),
        upstream: vec![],
    };
    let (classifier, m) = store.run(
        &key,
        || {
            let (m, r) =
                train_style_classifier(&data.train, &data.dev, &cfg.encoder, &cfg.classifier, s, ClassifierRole::Pipeline)?;
            let ck = m.to_checkpoint(s, &vh)?;
            Ok((m, ck, json(&r)))
        },
        StyleClassifier::from_checkpoint,
    )?;
    manifests.push(m);

    let s = seed(TAG_SOURCE);
    let key = StageKey {
        name: "source_encoder",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&(&cfg.encoder, &cfg.source_encoder)),
        upstream: vec![],
    };
    let (source_encoder, m) = store.run(
        &key,
        || {
            let (m, r) = train_source_content_encoder(&data.train, &cfg.encoder, &cfg.source_encoder, s)?;
            let ck = m.to_checkpoint(s, &vh)?;
            Ok((m, ck, json(&r)))
        },
        SourceContentEncoder::from_checkpoint,
    )?;
    let source_fp = m.fingerprint.clone();
    manifests.push(m);

    let s = seed(TAG_DETECTOR);
    let key = StageKey {
        name: "bias_detector",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&cfg.detector),
        upstream: vec![&source_fp],
    };
    let (detector, m) = store.run(
        &key,
        || {
            let latents: Vec<(LatentVector, StyleLabel)> = data
                .train
                .examples
                .par_iter()
                .map(|e| Ok((encode_source(&source_encoder, &e.tokens)?, e.label)))
                .collect::<Result<_>>()?;
            let (m, r) = train_bias_detector(&latents, cfg.detector.hidden, &cfg.detector.train, s)?;
            let ck = m.to_checkpoint(s, &vh);
            Ok((m, ck, json(&r)))
        },
        BiasDetector::from_checkpoint,
    )?;
    let detector_fp = m.fingerprint.clone();
    manifests.push(m);

    let s = seed(TAG_EMBEDDER);
    let key = StageKey {
        name: "token_embedder",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&(&cfg.encoder, &cfg.embedder)),
        upstream: vec![],
    };
    let (embedder, m) = store.run(
        &key,
        || {
            let (m, r) = train_token_embedder(&data.train, &cfg.encoder, &cfg.embedder, s)?;
            let ck = m.to_checkpoint("token_embedder", s, &vh)?;
            Ok((m, ck, json(&r)))
        },
        TokenEmbedder::from_checkpoint,
    )?;
    let embedder_fp = m.fingerprint.clone();
    manifests.push(m);

    let s = seed(TAG_LATENT);
    let key = StageKey {
        name: "latent_encoder",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&cfg.latent),
        upstream: vec![&source_fp, &detector_fp],
    };
    let (latent_encoder, m) = store.run(
        &key,
        || {
            let biased = data.train.with_label(StyleLabel::Biased);
            let dev = data.dev.with_label(StyleLabel::Biased);
            let (m, r) = train_latent_encoder(&biased, &dev, &source_encoder, &detector, &cfg.latent, s)?;
            let ck = m.to_checkpoint(s, &vh, cfg.latent.lambda)?;
            Ok((m, ck, json(&r)))
        },
        LatentContentEncoder::from_checkpoint,
    )?;
    manifests.push(m);

    let classifier_fp = manifests[0].fingerprint.clone();
    let mut decoders = BTreeMap::new();
    let neutral = data.train.with_label(StyleLabel::Neutral);
    for v in Variant::ALL {
        let s = seed(TAG_DECODER);
        let hyper = v.hyper(&cfg.decoder);
        let key = StageKey {
            name: v.stage(),
            seed: s,
            data_fingerprint: &data_fp,
            config: json(&hyper),
            upstream: vec![&embedder_fp, &source_fp, &classifier_fp],
        };
        let (dec, m) = store.run(
            &key,
            || {
                let (m, r) = train_token_decoder(&neutral, &embedder, &source_encoder, &classifier, &hyper, s)?;
                let ck = m.to_checkpoint(v.stage(), s, &vh, &hyper)?;
            Ok((m, ck, json(&r)))
            },
            |ck| Ok(TokenDecoder::from_checkpoint(ck)?.0),
        )?;
        manifests.push(m);
        decoders.insert(v, (dec, hyper));
    }

    let s = seed(TAG_EVAL_CLASSIFIER);
    let key = StageKey {
        name: "eval_classifier",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&(&cfg.encoder, &cfg.classifier)),
        upstream: vec![],
    };
    let (eval_classifier, m) = store.run(
        &key,
        || {
            let (m, r) = train_style_classifier(
                &data.train,
                &data.dev,
                &cfg.encoder,
                &cfg.classifier,
                s,
                ClassifierRole::Evaluation,
            )?;
            let ck = m.to_checkpoint(s, &vh)?;
            Ok((m, ck, json(&r)))
        },
        StyleClassifier::from_checkpoint,
    )?;
    manifests.push(m);

    let s = seed(TAG_EVAL_ENCODER);
    let key = StageKey {
        name: "eval_encoder",
        seed: s,
        data_fingerprint: &data_fp,
        config: json(&(&cfg.encoder, &cfg.embedder)),
        upstream: vec![],
    };
    let (eval_encoder, m) = store.run(
        &key,
        || {
            let (m, r) = train_token_embedder(&data.train, &cfg.encoder, &cfg.embedder, s)?;
            let ck = m.to_checkpoint("eval_encoder", s, &vh)?;
            Ok((m, ck, json(&r)))
        },
        TokenEmbedder::from_checkpoint,
    )?;
    manifests.push(m);

    let sentences: Vec<Vec<u32>> = data.train.examples.iter().map(|e| e.tokens.clone()).collect();
    let lm = train_kn_lm(&sentences, cfg.eval.lm_order, data.vocab().len())?;

    Ok(Models {
        classifier,
        source_encoder,
        detector,
        embedder,
        latent_encoder,
        decoders,
        eval_classifier,
        eval_encoder,
        lm,
        manifests,
    })
}

/// Masks computed once per sentence and shared by every decoder variant.
pub fn mask_examples(
    models: &Models,
    cfg: &RunConfig,
    examples: &[TextExample],
) -> Result<Vec<(Attribution, MaskedText)>> {
    let tcfg = models.transfer_config(cfg, Variant::Full);
    examples.par_iter().map(|x| mask_sentence(x, &models.classifier, &tcfg)).collect()
}

/// Decodes pre-masked sentences with one variant.
pub fn decode_variant(
    models: &Models,
    cfg: &RunConfig,
    masks: &[(Attribution, MaskedText)],
    variant: Variant,
) -> Result<Vec<TransferOutput>> {
    let (decoder, hyper) = &models.decoders[&variant];
    let alpha = models.transfer_config(cfg, variant).alpha;
    masks
        .par_iter()
        .map(|(attr, masked)| {
            let zhat = if alpha < 1.0 && !masked.masked_positions.is_empty() {
                Some(encode_latent(&models.latent_encoder, &masked.original.tokens)?)
            } else {
                None
            };
            debug_assert_eq!(hyper.alpha, alpha);
            let tokens = decode_masked(masked, &models.embedder, zhat.as_ref(), decoder, alpha)?;
            Ok(TransferOutput { tokens, masked: masked.clone(), attribution: attr.clone() })
        })
        .collect()
}

/// Transfers `examples` with one variant.
pub fn transfer_examples(
    models: &Models,
    cfg: &RunConfig,
    examples: &[TextExample],
    variant: Variant,
) -> Result<Vec<TransferOutput>> {
    let masks = mask_examples(models, cfg, examples)?;
    decode_variant(models, cfg, &masks, variant)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    /// Original baseline first, then one row per variant.
    pub rows: Vec<MetricsReport>,
    pub outputs: BTreeMap<Variant, Vec<Vec<u32>>>,
    pub masks: Vec<MaskedText>,
    /// Accuracy of the pipeline and evaluation classifiers on the test split.
    pub classifier_accuracy: f64,
    pub eval_classifier_accuracy: f64,
}

impl Evaluation {
    pub fn row(&self, system: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.system == system)
    }
}

/// Transfers every biased test sentence with all variants and scores them.
pub fn evaluate(models: &Models, cfg: &RunConfig, data: &Splits, neutral_lexicon: &[u32]) -> Result<Evaluation> {
    let sources = data.test.with_label(StyleLabel::Biased);
    let masks = mask_examples(models, cfg, &sources.examples)?;
    let originals: Vec<Vec<u32>> = masks.iter().map(|(_, m)| m.original.tokens.clone()).collect();
    let eval = EvalModels { classifier: &models.eval_classifier, encoder: &models.eval_encoder.encoder, lm: &models.lm };
    let fp = data.test.fingerprint();
    let hashes = models.checkpoint_hashes();

    let mut rows = vec![score_outputs("original", &originals, &originals, eval, &fp)?];
    let mut outputs = BTreeMap::new();
    for v in Variant::ALL {
        let out = decode_variant(models, cfg, &masks, v)?;
        let tokens: Vec<Vec<u32>> = out.iter().map(|o| o.tokens.clone()).collect();
        let mut row = score_outputs(&v.to_string(), &originals, &tokens, eval, &fp)?;
        row.gold_replacement_rate = gold_replacement_rate(&out, neutral_lexicon);
        row.checkpoint_hashes = hashes.clone();
        rows.push(row);
        outputs.insert(v, tokens);
    }
    let max_len = cfg.encoder.max_len;
    Ok(Evaluation {
        rows,
        outputs,
        masks: masks.into_iter().map(|(_, m)| m).collect(),
        classifier_accuracy: classifier_accuracy(&models.classifier, &data.test, max_len)?,
        eval_classifier_accuracy: classifier_accuracy(&models.eval_classifier, &data.test, max_len)?,
    })
}
