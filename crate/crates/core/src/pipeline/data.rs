use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{load_corpus, Corpus, Lexicon, LoadOptions, Split, SyntheticSplits, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl From<SyntheticSplits> for Splits {
    fn from(s: SyntheticSplits) -> Self {
        Self { train: s.train, dev: s.dev, test: s.test }
    }
}

impl Splits {
    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.train.vocab
    }
}

const SPLITS: [(&str, Split); 3] = [("train", Split::Train), ("dev", Split::Dev), ("test", Split::Test)];

fn gold_lines(c: &Corpus) -> String {
    let mut s = String::new();
    for e in &c.examples {
        match &e.gold_attribute_positions {
            Some(g) => s.push_str(&g.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")),
            None => s.push('-'),
        }
        s.push('\n');
    }
    s
}

/// Writes `{train,dev,test}.tsv`, the matching `.gold` files and `vocab.json`.
pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, c) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        fs::write(dir.join(format!("{name}.tsv")), c.to_tsv())?;
        if c.examples.iter().any(|e| e.gold_attribute_positions.is_some()) {
            fs::write(dir.join(format!("{name}.gold")), gold_lines(c))?;
        }
    }
    fs::write(dir.join("vocab.json"), serde_json::to_string(splits.vocab().as_ref())?)?;
    Ok(())
}

fn attach_gold(c: &mut Corpus, path: &Path) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != c.len() {
        log::warn!("{}: {} lines for {} examples; ignoring", path.display(), lines.len(), c.len());
        return Ok(());
    }
    for (i, (e, line)) in c.examples.iter_mut().zip(&lines).enumerate() {
        let line = line.trim();
        if line == "-" {
            continue;
        }
        let pos: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "expected positions".into() })?;
        if pos.iter().any(|&p| p >= e.tokens.len()) {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "position out of range".into() });
        }
        e.gold_attribute_positions = Some(pos);
    }
    Ok(())
}

/// Reads the three splits from `dir`. A `vocab.json` there is used as is;
/// otherwise the vocabulary is built from the training split.
pub fn load_splits(dir: &Path, max_len: usize, min_count: usize) -> Result<Splits> {
    let vocab_path = dir.join("vocab.json");
    let mut vocab: Option<Arc<Vocabulary>> = match fs::read_to_string(&vocab_path) {
        Ok(t) => Some(Arc::new(serde_json::from_str(&t)?)),
        Err(_) => None,
    };
    let mut out = Vec::new();
    for (name, split) in SPLITS {
        let opts = LoadOptions { split, max_len, min_count, ..LoadOptions::default() };
        let mut c = load_corpus(&dir.join(format!("{name}.tsv")), vocab.clone(), &opts)?;
        vocab.get_or_insert_with(|| c.vocab.clone());
        attach_gold(&mut c, &dir.join(format!("{name}.gold")))?;
        out.push(c);
    }
    let test = out.pop().unwrap();
    let dev = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Splits { train, dev, test })
}

/// Ids of the lexicon's neutral words present in `vocab`.
pub fn neutral_ids(lex: &Lexicon, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = lex.pairs.iter().filter_map(|p| vocab.get(&p.neutral)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}
