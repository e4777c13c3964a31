mod common;

use common::th;
use debias_core::corpus::{synthesize_corpus, synthesize_splits, Lexicon};
use debias_core::eval::{perplexity, train_kn_lm, NgramModel, DEFAULT_ORDER};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sentences(n: usize, seed: u64) -> (Vec<Vec<u32>>, usize) {
    let c = synthesize_corpus(seed, n / 2, &Lexicon::builtin()).unwrap();
    (c.examples.iter().map(|e| e.tokens.clone()).collect(), c.vocab.len())
}

#[test]
fn every_observed_context_is_normalized() {
    let (corpus, v) = sentences(th("kn_sentences") as usize, 5);
    let lm = train_kn_lm(&corpus, DEFAULT_ORDER, v).unwrap();
    let ids = lm.predictable_ids();
    let tol = th("kn_norm_tol");
    let mut checked = 0;
    for k in 1..=DEFAULT_ORDER {
        for ctx in lm.observed_contexts(k) {
            let s: f64 = ids.iter().map(|&w| lm.prob_at_order(k, w, &ctx)).sum();
            assert!((s - 1.0).abs() <= tol, "order {k} {ctx:?}: {s}");
            checked += 1;
        }
    }
    assert!(checked > 1000, "{checked}");
}

#[test]
fn unseen_context_falls_back_normalized() {
    let (corpus, v) = sentences(200, 6);
    let lm = train_kn_lm(&corpus, 3, v).unwrap();
    let s: f64 = lm.predictable_ids().iter().map(|&w| lm.prob(w, &[9999, 9998])).sum();
    assert!((s - 1.0).abs() < 1e-9);
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let (corpus, _) = sentences(200, 7);
    for v in [50, 200, 1000] {
        let ppl = perplexity(&NgramModel::uniform(v), &corpus).unwrap();
        assert!((ppl - v as f64).abs() <= th("kn_uniform_tol"), "{v}: {ppl}");
    }
}

#[test]
fn shuffled_corpus_is_less_fluent() {
    let (corpus, v) = sentences(400, 8);
    let lm = train_kn_lm(&corpus, DEFAULT_ORDER, v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shuffled: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.shuffle(&mut rng);
            s
        })
        .collect();
    let a = perplexity(&lm, &corpus).unwrap();
    let b = perplexity(&lm, &shuffled).unwrap();
    assert!(a < b, "{a} vs {b}");
}

#[test]
fn held_out_beats_uniform() {
    let s = synthesize_splits(9, 200, 10, 50, &Lexicon::builtin()).unwrap();
    let toks = |c: &debias_core::corpus::Corpus| c.examples.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>();
    let (train, test, v) = (toks(&s.train), toks(&s.test), s.train.vocab.len());
    let lm = train_kn_lm(&train, DEFAULT_ORDER, v).unwrap();
    let ppl = perplexity(&lm, &test).unwrap();
    assert!(ppl.is_finite() && ppl < (v - 2) as f64 / 4.0, "{ppl}");
}
