mod common;

use common::{e2e, logistic_probe};
use debias_core::corpus::{Corpus, StyleLabel};
use debias_core::latent::{encode_latent, encode_source, lce_loss, lce_metrics, train_latent_encoder, LceHyper};
use debias_core::nn::{cosine_similarity, LatentVector, Params, TrainConfig};

fn z_rows(r: &common::E2e, c: &Corpus) -> Vec<(Vec<f64>, usize)> {
    c.examples
        .iter()
        .map(|e| {
            let z = encode_source(&r.models.source_encoder, &e.tokens).unwrap();
            (z.values.iter().map(|&v| v as f64).collect(), e.label.index())
        })
        .collect()
}

#[test]
fn linear_probe_reads_style_from_z() {
    let r = e2e(false);
    let acc = logistic_probe(&z_rows(r, &r.data.train), &z_rows(r, &r.data.dev));
    assert!(acc >= 0.9, "{acc}");
}

/// Example `2i` is biased and `2i + 1` is its twin.
#[test]
fn z_is_closer_to_its_twin_than_to_other_sentences() {
    let r = e2e(false);
    let ex = &r.data.dev.examples;
    let z: Vec<LatentVector> = ex.iter().map(|e| encode_source(&r.models.source_encoder, &e.tokens).unwrap()).collect();
    let pairs = ex.len() / 2;
    let (mut twin, mut other) = (0.0, 0.0);
    for i in 0..pairs {
        assert_eq!(ex[2 * i].label, StyleLabel::Biased);
        let j = (i + pairs / 2) % pairs;
        twin += cosine_similarity(&z[2 * i], &z[2 * i + 1]).unwrap() as f64;
        other += cosine_similarity(&z[2 * i], &z[2 * j + 1]).unwrap() as f64;
    }
    let (twin, other) = (twin / pairs as f64, other / pairs as f64);
    eprintln!("mean twin cosine {twin:.3}, mismatched {other:.3}");
    assert!(twin > other, "{twin} vs {other}");
}

#[test]
fn latent_encoder_meets_targets() {
    let r = e2e(false);
    let dev = r.data.dev.with_label(StyleLabel::Biased);
    let m = &r.models;
    let after = lce_metrics(&m.latent_encoder, &m.source_encoder, &m.detector, &dev, r.cfg.latent.lambda).unwrap();
    assert!(after.mean_p_neutral >= 0.8, "{after:?}");
    assert!(after.mean_cos >= 0.8, "{after:?}");
    let rep = r.report("latent_encoder");
    let before = rep["initial"]["mean_p_neutral"].as_f64().unwrap();
    assert!(after.mean_p_neutral > before);
}

fn small_biased(r: &common::E2e, n: usize) -> Corpus {
    let b = r.data.train.with_label(StyleLabel::Biased);
    Corpus::new(b.examples[..n].to_vec(), b.split, b.vocab.clone()).unwrap()
}

#[test]
fn zero_lambda_keeps_z() {
    let r = e2e(false);
    let m = &r.models;
    let hyper = LceHyper { lambda: 0.0, train: TrainConfig { epochs: 1, ..r.cfg.latent.train.clone() } };
    let dev = r.data.dev.with_label(StyleLabel::Biased);
    let (lce, _) = train_latent_encoder(&small_biased(r, 200), &dev, &m.source_encoder, &m.detector, &hyper, 3).unwrap();
    let met = lce_metrics(&lce, &m.source_encoder, &m.detector, &dev, 0.0).unwrap();
    assert!(met.mean_cos >= 0.99, "{met:?}");
}

#[test]
fn frozen_models_stay_frozen() {
    let r = e2e(false);
    let m = &r.models;
    let sums = (m.source_encoder.checksum(), m.detector.checksum());
    let hyper = LceHyper { train: TrainConfig { epochs: 1, ..r.cfg.latent.train.clone() }, ..r.cfg.latent.clone() };
    let dev = r.data.dev.with_label(StyleLabel::Biased);
    let (lce, _) = train_latent_encoder(&small_biased(r, 100), &dev, &m.source_encoder, &m.detector, &hyper, 4).unwrap();
    assert_eq!((m.source_encoder.checksum(), m.detector.checksum()), sums);
    assert_ne!(lce.checksum(), m.source_encoder.encoder.checksum());
}

#[test]
fn neutral_training_data_is_rejected() {
    let r = e2e(false);
    let m = &r.models;
    let err = train_latent_encoder(&r.data.dev, &r.data.dev, &m.source_encoder, &m.detector, &r.cfg.latent, 1);
    assert!(err.is_err());
}

#[test]
fn objective_is_linear_in_lambda() {
    let r = e2e(false);
    let m = &r.models;
    let ex = &r.data.dev.with_label(StyleLabel::Biased).examples[..20];
    let zh: Vec<_> = ex.iter().map(|e| encode_latent(&m.latent_encoder, &e.tokens).unwrap()).collect();
    let z: Vec<_> = ex.iter().map(|e| encode_source(&m.source_encoder, &e.tokens).unwrap()).collect();
    let at = |lam| lce_loss(&zh, &z, &m.detector, lam).unwrap().total;
    assert!((at(0.5) - (at(0.0) + at(1.0)) / 2.0).abs() < 1e-9);
}
