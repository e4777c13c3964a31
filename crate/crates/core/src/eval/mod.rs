//! Automatic metrics: transfer accuracy, content preservation and n-gram
//! perplexity.

mod kn;
mod metrics;

pub use kn::{perplexity, train_kn_lm, NgramModel, DEFAULT_ORDER, FALLBACK_DISCOUNT};
pub use metrics::{
    content_preservation, evaluate_corpus, format_table, gold_mask_recall, gold_replacement_rate, score_outputs,
    transfer_accuracy, transfer_corpus, ContentPreservation, EvalModels, MetricsReport,
};
