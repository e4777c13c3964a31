//! One line per acceptance criterion. Criteria 1-4 and 6 are fatal; the
//! ablation-direction criterion (5) is reported, and only fatal when
//! `ACCEPTANCE_STRICT` is set.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{e2e, oracle_suite, th, worst};
use debias_core::corpus::{synthesize_corpus, Lexicon};
use debias_core::eval::{format_table, perplexity, train_kn_lm, NgramModel, DEFAULT_ORDER};
use debias_core::pipeline::{decode_variant, evaluate, mask_examples, Variant};
use debias_core::stats::{median, spearman};

struct Outcome {
    id: &'static str,
    pass: bool,
    fatal: bool,
}

fn report(id: &'static str, pass: bool, fatal: bool, what: String) -> Outcome {
    println!("{} criterion {id}: {what}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass, fatal }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let r = common::gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let (err, name) = worst(&r);
    let (tol, budget) = (th("grad_rel_err"), th("grad_max_secs"));
    report(
        "1",
        err < tol && secs < budget,
        true,
        format!("gradient suite, {} tensors, worst rel err {err:.2e} ({name}) < {tol:e}, {secs:.1}s < {budget}s", r.len()),
    )
}

fn explainer() -> Outcome {
    let t0 = Instant::now();
    let s = oracle_suite(th("explainer_sentences") as usize, th("explainer_max_tokens") as usize, 21);
    let n = th("explainer_samples") as usize;
    let truth = median(&s.spearman_to_truth(n)).unwrap();
    let agree: Vec<f64> = (0..s.sentences.len()).map(|i| spearman(&s.sampled(i, n), &s.exact(i, n)).unwrap_or(0.0)).collect();
    let agree = median(&agree).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (a, b, budget) = (th("explainer_min_spearman"), th("explainer_min_rank_agreement"), th("explainer_max_secs"));
    report(
        "2",
        truth >= a && agree >= b && secs < budget,
        true,
        format!(
            "explainer oracle, {} sentences: median spearman to true coefficients {truth:.3} >= {a}, \
             sampled vs enumerated rank agreement {agree:.3} >= {b}, {secs:.1}s < {budget}s",
            s.sentences.len()
        ),
    )
}

fn language_model() -> Outcome {
    let t0 = Instant::now();
    let c = synthesize_corpus(5, th("kn_sentences") as usize / 2, &Lexicon::builtin()).unwrap();
    let corpus: Vec<Vec<u32>> = c.examples.iter().map(|e| e.tokens.clone()).collect();
    let lm = train_kn_lm(&corpus, DEFAULT_ORDER, c.vocab.len()).unwrap();
    let ids = lm.predictable_ids();
    let (mut dev, mut contexts) = (0.0f64, 0);
    for k in 1..=DEFAULT_ORDER {
        for ctx in lm.observed_contexts(k) {
            let s: f64 = ids.iter().map(|&w| lm.prob_at_order(k, w, &ctx)).sum();
            dev = dev.max((s - 1.0).abs());
            contexts += 1;
        }
    }
    let v = c.vocab.len();
    let uni = (perplexity(&NgramModel::uniform(v), &corpus).unwrap() - v as f64).abs();
    let secs = t0.elapsed().as_secs_f64();
    let (nt, ut, budget) = (th("kn_norm_tol"), th("kn_uniform_tol"), th("kn_max_secs"));
    report(
        "3",
        dev <= nt && uni <= ut && secs < budget,
        true,
        format!(
            "KN LM on {} sentences: max |sum P - 1| {dev:.1e} <= {nt:e} over {contexts} contexts, \
             |uniform PPL - V| {uni:.1e} <= {ut:e}, {secs:.2}s < {budget}s",
            corpus.len()
        ),
    )
}

fn end_to_end() -> Vec<Outcome> {
    let t0 = Instant::now();
    let run = e2e(true);
    let ev = evaluate(&run.models, &run.cfg, &run.data, &run.neutral_ids()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    print!("{}", format_table(&ev.rows));
    let row = |s: &str| ev.row(s).unwrap();
    let (orig, full, nl, nlnc) = (row("original"), row("full"), row("no-latent"), row("no-latent-no-constraint"));
    let mut out = Vec::new();

    let (ac, cp, pr, gr, budget) = (
        th("e2e_min_transfer_accuracy"),
        th("e2e_min_content_preservation"),
        th("e2e_max_perplexity_ratio"),
        th("e2e_min_gold_replacement"),
        th("e2e_max_secs"),
    );
    let ratio = full.perplexity / orig.perplexity;
    let gold = full.gold_replacement_rate.unwrap_or(0.0);
    out.push(report(
        "4",
        full.transfer_accuracy >= ac
            && full.content_preservation >= cp
            && ratio <= pr
            && gold >= gr
            && secs < budget,
        true,
        format!(
            "end-to-end (seed {}, {} train sentences, vocab {}): AC {:.2} >= {ac}, C.P. {:.2} >= {cp}, \
             PPL ratio {ratio:.3} <= {pr}, gold replacement {gold:.3} >= {gr}, {secs:.0}s < {budget}s (train {:.0}s)",
            run.cfg.seed,
            run.data.train.len(),
            run.data.vocab().len(),
            full.transfer_accuracy,
            full.content_preservation,
            run.train_secs,
        ),
    ));

    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    out.push(report(
        "5a",
        nl.content_preservation < full.content_preservation,
        strict,
        format!(
            "ablation: C.P. without latent {:.2} < full {:.2}",
            nl.content_preservation, full.content_preservation
        ),
    ));
    out.push(report(
        "5b",
        nlnc.transfer_accuracy < nl.transfer_accuracy,
        strict,
        format!(
            "ablation: AC without latent and constraint {:.2} < without latent {:.2}",
            nlnc.transfer_accuracy, nl.transfer_accuracy
        ),
    ));

    // structural invariants over the whole test split, both styles
    let masks = mask_examples(&run.models, &run.cfg, &run.data.test.examples).unwrap();
    let vocab = run.data.vocab();
    let (mut sentences, mut pass_through, mut bad) = (0, 0, Vec::new());
    for v in Variant::ALL {
        for o in decode_variant(&run.models, &run.cfg, &masks, v).unwrap() {
            sentences += 1;
            let src = &o.masked.original.tokens;
            let ok_len = o.tokens.len() == src.len();
            let ok_pos = ok_len && (0..src.len()).all(|i| o.masked.is_masked(i) || o.tokens[i] == src[i]);
            let ok_pass = if o.masked.masked_positions.is_empty() {
                pass_through += 1;
                vocab.decode(&o.tokens).as_bytes() == vocab.decode(src).as_bytes()
            } else {
                true
            };
            if !(ok_len && ok_pos && ok_pass) {
                bad.push(format!("{v}: {}", vocab.decode(src)));
            }
        }
    }
    for b in bad.iter().take(5) {
        println!("  violation {b}");
    }
    out.push(report(
        "6",
        bad.is_empty() && pass_through > 0,
        true,
        format!(
            "structure: {sentences} transfers over {} test sentences x {} variants, {} violations, \
             {pass_through} pass-through outputs identical",
            run.data.test.len(),
            Variant::ALL.len(),
            bad.len()
        ),
    ));
    out
}

fn main() -> ExitCode {
    let mut all = vec![gradients(), explainer(), language_model()];
    all.extend(end_to_end());
    let failed: Vec<&str> = all.iter().filter(|o| !o.pass && o.fatal).map(|o| o.id).collect();
    let waived: Vec<&str> = all.iter().filter(|o| !o.pass && !o.fatal).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        all.iter().filter(|o| o.pass).count(),
        all.len(),
        if waived.is_empty() { String::new() } else { format!("; non-fatal failures: {}", waived.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: fatal failures: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
