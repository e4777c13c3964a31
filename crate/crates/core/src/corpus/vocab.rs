use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenize::split_words;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_SURFACES: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"];

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_TYPES: usize = 2000;

/// Frozen surface↔id mapping. Ids 0..5 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(surfaces: Vec<String>) -> Self {
        let ids = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { surfaces, ids }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.surfaces
    }
}

impl Vocabulary {
    /// Specials followed by `words` in the given order; duplicates are dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut surfaces: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = surfaces.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                surfaces.push(w);
            }
        }
        Self::from(surfaces)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<u32> {
        self.ids.get(surface).copied()
    }

    /// Id of `surface`, or [`UNK`].
    pub fn id(&self, surface: &str) -> u32 {
        self.get(surface).unwrap_or(UNK)
    }

    pub fn surface(&self, id: u32) -> &str {
        self.surfaces
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_SURFACES[UNK as usize])
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.surface(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// SHA-256 of the newline-joined surfaces, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.surfaces {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Builds a vocabulary from raw texts: every word seen at least `min_count`
/// times, ordered by descending frequency then surface, capped at `max_types`
/// non-special entries.
pub fn build_vocab<'a, I>(texts: I, min_count: usize, max_types: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in split_words(t) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !SPECIAL_SURFACES.contains(&w.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(max_types);
    Vocabulary::from_words(entries.into_iter().map(|(w, _)| w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_surface_order() {
        let v = build_vocab(["a a b"], 1, DEFAULT_MAX_TYPES);
        assert_eq!(v.len(), 7);
        assert_eq!(v.get("a"), Some(5));
        assert_eq!(v.get("b"), Some(6));
        assert_eq!(v.surface(MASK), "[MASK]");

        let v = build_vocab(["c b a", "a b"], 1, DEFAULT_MAX_TYPES);
        assert_eq!(&v.surfaces()[5..], &["a", "b", "c"]);
    }

    #[test]
    fn min_count_threshold() {
        let v = build_vocab(["a b"], 2, DEFAULT_MAX_TYPES);
        assert_eq!(v.len(), NUM_SPECIAL);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn cap_and_determinism() {
        let docs = ["x y z z y z", "w"];
        let a = build_vocab(docs, 1, 2);
        let b = build_vocab(docs, 1, 2);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(&a.surfaces()[5..], &["z", "y"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(["the man left ."], 1, 100);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("man"), v.id("man"));
    }
}
