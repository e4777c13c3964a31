//! Corpora, tokenization, vocabularies, and the synthetic biased-corpus
//! generator.

mod synth;
mod tokenize;
mod vocab;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synth::{
    synthesize_corpus, synthesize_splits, AttributePair, Lexicon, SyntheticSplits,
    DEFAULT_TOPIC_AFFINITY,
};
pub use tokenize::{split_sentences, split_words, tokenize};
pub use vocab::{
    build_vocab, Vocabulary, BOS, DEFAULT_MAX_TYPES, DEFAULT_MIN_COUNT, EOS, MASK, NUM_SPECIAL, PAD,
    SPECIAL_SURFACES, UNK,
};

pub const DEFAULT_MAX_LEN: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleLabel {
    Neutral,
    Biased,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 2] = [StyleLabel::Neutral, StyleLabel::Biased];

    /// Class index: neutral 0, biased 1.
    pub fn index(self) -> usize {
        match self {
            StyleLabel::Neutral => 0,
            StyleLabel::Biased => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(StyleLabel::Neutral),
            1 => Some(StyleLabel::Biased),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            StyleLabel::Neutral => StyleLabel::Biased,
            StyleLabel::Biased => StyleLabel::Neutral,
        }
    }

    /// Accepts `neutral`/`biased`, and `male`/`female` for obfuscation data
    /// (male maps to the target class).
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" | "male" => Some(StyleLabel::Neutral),
            "biased" | "female" => Some(StyleLabel::Biased),
            _ => None,
        }
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleLabel::Neutral => "neutral",
            StyleLabel::Biased => "biased",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub tokens: Vec<u32>,
    pub label: StyleLabel,
    pub gold_attribute_positions: Option<Vec<usize>>,
}

impl TextExample {
    pub fn new(tokens: Vec<u32>, label: StyleLabel) -> Self {
        Self { tokens, label, gold_attribute_positions: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        for &t in &self.tokens {
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { id: t as usize, size: vocab_size });
            }
            if t == MASK {
                return Err(Error::InvalidArgument("raw example contains [MASK]".into()));
            }
        }
        if let Some(g) = &self.gold_attribute_positions {
            if let Some(&p) = g.iter().find(|&&p| p >= self.tokens.len()) {
                return Err(Error::InvalidArgument(format!(
                    "gold position {p} outside sentence of length {}",
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub examples: Vec<TextExample>,
    pub split: Split,
    pub vocab: Arc<Vocabulary>,
}

impl Corpus {
    pub fn new(examples: Vec<TextExample>, split: Split, vocab: Arc<Vocabulary>) -> Result<Self> {
        for e in &examples {
            e.validate(vocab.len())?;
        }
        Ok(Self { examples, split, vocab })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, label: StyleLabel) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    /// Examples of one class, in corpus order.
    pub fn with_label(&self, label: StyleLabel) -> Corpus {
        Corpus {
            examples: self.examples.iter().filter(|e| e.label == label).cloned().collect(),
            split: self.split,
            vocab: self.vocab.clone(),
        }
    }

    pub fn text(&self, i: usize) -> String {
        self.vocab.decode(&self.examples[i].tokens)
    }

    /// SHA-256 over the vocabulary hash, labels, and token ids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.hash().as_bytes());
        for e in &self.examples {
            h.update([e.label.index() as u8]);
            h.update((e.tokens.len() as u32).to_le_bytes());
            for t in &e.tokens {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `label<TAB>text` lines, readable by [`load_corpus`].
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, e) in self.examples.iter().enumerate() {
            s.push_str(&e.label.to_string());
            s.push('\t');
            s.push_str(&self.text(i));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub split: Split,
    pub max_len: usize,
    pub min_count: usize,
    pub max_types: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            split: Split::Train,
            max_len: DEFAULT_MAX_LEN,
            min_count: DEFAULT_MIN_COUNT,
            max_types: DEFAULT_MAX_TYPES,
        }
    }
}

/// Parses `label<TAB>text` lines. Blank lines are skipped; texts holding
/// several sentences yield one record per sentence.
pub fn parse_records(path: &Path, content: &str) -> Result<Vec<(StyleLabel, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, msg };
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `label<TAB>text`".into()))?;
        let label = StyleLabel::parse(label).ok_or_else(|| err(format!("unknown label `{}`", label.trim())))?;
        if text.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        for s in split_sentences(text) {
            out.push((label, s));
        }
    }
    Ok(out)
}

/// Loads a labeled corpus. When `vocab` is absent, one is built from this
/// file (intended for the training split) with `opts.min_count`.
pub fn load_corpus(path: &Path, vocab: Option<Arc<Vocabulary>>, opts: &LoadOptions) -> Result<Corpus> {
    let content = std::fs::read_to_string(path)?;
    let records = parse_records(path, &content)?;
    let vocab = match vocab {
        Some(v) => v,
        None => Arc::new(build_vocab(
            records.iter().map(|(_, t)| t.as_str()),
            opts.min_count,
            opts.max_types,
        )),
    };
    let mut examples = Vec::with_capacity(records.len());
    let mut rejected = 0usize;
    for (label, text) in &records {
        match tokenize(text, &vocab, opts.max_len) {
            Ok(tokens) => examples.push(TextExample::new(tokens, *label)),
            Err(Error::EmptyText) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} empty examples", path.display());
    }
    Corpus::new(examples, opts.split, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_lines() {
        let f = write_tmp("neutral\tthe people left .\nbiased\tthe men left .\n");
        let opts = LoadOptions { min_count: 1, ..Default::default() };
        let c = load_corpus(f.path(), None, &opts).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.examples[0].label, StyleLabel::Neutral);
        assert_eq!(c.examples[1].label, StyleLabel::Biased);
        assert_eq!(c.text(1), "the men left .");
    }

    #[test]
    fn unknown_label_names_line() {
        let f = write_tmp("neutral\tok .\nfoo\tbad .\n");
        match load_corpus(f.path(), None, &LoadOptions::default()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("foo"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line() {
        let f = write_tmp("neutral\tok .\n\nno tab here\n");
        match load_corpus(f.path(), None, &LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn obfuscation_labels_and_sentence_split() {
        let f = write_tmp("female\tShe left. She came back!\nmale\the stayed .\n");
        let opts = LoadOptions { min_count: 1, ..Default::default() };
        let c = load_corpus(f.path(), None, &opts).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.count(StyleLabel::Biased), 2);
        assert_eq!(c.text(1), "she came back !");
    }

    #[test]
    fn tsv_round_trip() {
        let f = write_tmp("neutral\tthe people left .\nbiased\tthe men left .\n");
        let opts = LoadOptions { min_count: 1, ..Default::default() };
        let c = load_corpus(f.path(), None, &opts).unwrap();
        let g = write_tmp(&c.to_tsv());
        let d = load_corpus(g.path(), Some(c.vocab.clone()), &opts).unwrap();
        assert_eq!(c.fingerprint(), d.fingerprint());
    }

    #[test]
    fn mask_in_raw_example_is_rejected() {
        let v = Arc::new(Vocabulary::from_words(["a"]));
        let e = TextExample::new(vec![MASK], StyleLabel::Neutral);
        assert!(Corpus::new(vec![e], Split::Train, v).is_err());
    }
}
