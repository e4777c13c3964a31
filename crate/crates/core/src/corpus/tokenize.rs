use super::vocab::Vocabulary;
use crate::error::{Error, Result};

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lower-cases and splits on whitespace; each punctuation character becomes
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Maps `text` to vocabulary ids, truncating to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let ids: Vec<u32> = split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(ids)
}

/// Splits on runs of sentence-final punctuation (`.`, `!`, `?`), keeping the
/// punctuation with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let is_final = |c: char| matches!(c, '.' | '!' | '?');
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        let next_final = chars.get(i + 1).is_some_and(|&n| is_final(n));
        if is_final(c) && !next_final {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}
