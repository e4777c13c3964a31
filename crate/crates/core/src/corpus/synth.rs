use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::{split_words, tokenize};
use super::vocab::build_vocab;
use super::{Corpus, Split, StyleLabel, TextExample, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};

pub const ATTR_SLOT: &str = "{ATTR}";
pub const FILL_SLOT: &str = "{FILL}";

/// Probability that a filler slot draws from the pair's own topic.
pub const DEFAULT_TOPIC_AFFINITY: f64 = 0.6;

const MIN_PAIRS: usize = 20;
const MIN_TEMPLATES: usize = 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePair {
    pub biased: String,
    pub neutral: String,
    pub topic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub pairs: Vec<AttributePair>,
    pub templates: Vec<String>,
    pub fillers: BTreeMap<String, Vec<String>>,
    pub topic_affinity: f64,
}

const BUILTIN_PAIRS: &[(&str, &str, &str)] = &[
    ("mothers", "parents", "family"),
    ("daughters", "children", "family"),
    ("wives", "spouses", "family"),
    ("sisters", "siblings", "family"),
    ("businessmen", "professionals", "work"),
    ("chairmen", "chairpersons", "work"),
    ("salesmen", "salespeople", "work"),
    ("waitresses", "servers", "work"),
    ("policemen", "officers", "service"),
    ("firemen", "firefighters", "service"),
    ("sportsmen", "athletes", "service"),
    ("craftsmen", "artisans", "service"),
    ("schoolgirls", "students", "school"),
    ("headmistresses", "principals", "school"),
    ("boys", "kids", "school"),
    ("girls", "youngsters", "school"),
    ("ladies", "people", "social"),
    ("gentlemen", "guests", "social"),
    ("men", "individuals", "social"),
    ("women", "adults", "social"),
    ("kings", "rulers", "realm"),
    ("queens", "monarchs", "realm"),
    ("princes", "heirs", "realm"),
    ("heroines", "protagonists", "realm"),
];

const BUILTIN_FILLERS: &[(&str, &str)] = &[
    ("family", "home kitchen garden dinner holiday house birthday picnic wedding breakfast"),
    ("work", "office meeting project company budget contract report deadline client market"),
    ("service", "station city emergency street patrol rescue fire truck alarm stadium"),
    ("school", "school classroom homework lesson exam library playground science course campus"),
    ("social", "party concert club festival dance restaurant museum theater trip beach"),
    ("realm", "castle kingdom palace crown throne army treaty court empire ceremony"),
];

const BUILTIN_TEMPLATES: &[&str] = &[
    "the event welcomed all the {ATTR} here .",
    "the event was great for all the {ATTR} working in the {FILL} .",
    "all the {ATTR} talked about the {FILL} today .",
    "many {ATTR} enjoyed the {FILL} last week .",
    "we asked the {ATTR} about the {FILL} and the {FILL} .",
    "the {FILL} was busy so the {ATTR} stayed late .",
    "some {ATTR} said the {FILL} was too small .",
    "the {ATTR} organized a {FILL} for everyone .",
    "i think the {ATTR} will love the new {FILL} .",
    "our {ATTR} spent the whole day at the {FILL} .",
    "the {ATTR} were happy with the {FILL} .",
    "every year the {ATTR} plan a big {FILL} .",
    "the local {ATTR} complained about the {FILL} .",
    "a group of {ATTR} visited the {FILL} on sunday .",
    "the {ATTR} in the {FILL} were very friendly .",
    "nobody expected the {ATTR} to leave the {FILL} early .",
    "the {FILL} needs more {ATTR} this season .",
    "those {ATTR} always talk about the {FILL} .",
    "the {ATTR} shared stories about the {FILL} and the {FILL} .",
    "after the {FILL} the {ATTR} went home together .",
    "the report praised the {ATTR} for the {FILL} .",
    "i met two {ATTR} near the {FILL} yesterday .",
    "the {ATTR} asked for help with the {FILL} .",
    "thanks to the {ATTR} the {FILL} was a success .",
    "the {ATTR} decided to rebuild the {FILL} .",
    "most {ATTR} prefer a quiet {FILL} .",
    "the {ATTR} could not find the {FILL} .",
    "several {ATTR} joined the {FILL} this morning .",
    "the new {FILL} was designed by {ATTR} .",
    "the {ATTR} waited outside the {FILL} for hours .",
    "the {ATTR} laughed during the {FILL} .",
    "you should ask the {ATTR} about the {FILL} .",
];

impl Lexicon {
    pub fn builtin() -> Self {
        Self {
            pairs: BUILTIN_PAIRS
                .iter()
                .map(|(b, n, t)| AttributePair {
                    biased: b.to_string(),
                    neutral: n.to_string(),
                    topic: Some(t.to_string()),
                })
                .collect(),
            templates: BUILTIN_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            fillers: builtin_fillers(),
            topic_affinity: DEFAULT_TOPIC_AFFINITY,
        }
    }

    /// Reads a pair table (`biased<TAB>neutral[<TAB>topic]`), a template file
    /// (one per line, each with `{ATTR}`), and optionally a filler table
    /// (`topic<TAB>word word ...`). Without a filler table the built-in one is
    /// used.
    pub fn from_files(pairs: &Path, templates: &Path, fillers: Option<&Path>) -> Result<Self> {
        let perr = |p: &Path, line: usize, msg: &str| Error::Parse {
            path: p.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lex_pairs = Vec::new();
        for (i, line) in std::fs::read_to_string(pairs)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() < 2 || cols.len() > 3 || cols[0].is_empty() || cols[1].is_empty() {
                return Err(perr(pairs, i + 1, "expected `biased<TAB>neutral[<TAB>topic]`"));
            }
            lex_pairs.push(AttributePair {
                biased: cols[0].to_lowercase(),
                neutral: cols[1].to_lowercase(),
                topic: cols.get(2).filter(|t| !t.is_empty()).map(|t| t.to_string()),
            });
        }
        let lex_templates: Vec<String> = std::fs::read_to_string(templates)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let lex_fillers = match fillers {
            None => builtin_fillers(),
            Some(p) => {
                let mut m = BTreeMap::new();
                for (i, line) in std::fs::read_to_string(p)?.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let (topic, words) = line
                        .split_once('\t')
                        .ok_or_else(|| perr(p, i + 1, "expected `topic<TAB>words`"))?;
                    let words: Vec<String> = words.split_whitespace().map(|w| w.to_lowercase()).collect();
                    if words.is_empty() {
                        return Err(perr(p, i + 1, "topic without fillers"));
                    }
                    m.insert(topic.trim().to_string(), words);
                }
                m
            }
        };
        let lex = Self {
            pairs: lex_pairs,
            templates: lex_templates,
            fillers: lex_fillers,
            topic_affinity: DEFAULT_TOPIC_AFFINITY,
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.pairs.len() < MIN_PAIRS {
            return bad(format!("lexicon needs at least {MIN_PAIRS} pairs, has {}", self.pairs.len()));
        }
        if self.templates.len() < MIN_TEMPLATES {
            return bad(format!(
                "lexicon needs at least {MIN_TEMPLATES} templates, has {}",
                self.templates.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.topic_affinity) {
            return bad(format!("topic affinity {} outside [0, 1]", self.topic_affinity));
        }
        let single = |w: &str| split_words(w) == [w.to_string()];
        for p in &self.pairs {
            if !single(&p.biased) || !single(&p.neutral) || p.biased == p.neutral {
                return bad(format!("pair {}/{} must be two distinct single words", p.biased, p.neutral));
            }
            if let Some(t) = &p.topic {
                if !self.fillers.contains_key(t) {
                    return bad(format!("pair {} names unknown topic `{t}`", p.biased));
                }
            }
        }
        for (t, ws) in &self.fillers {
            if ws.is_empty() || !ws.iter().all(|w| single(w)) {
                return bad(format!("topic `{t}` must list single-word fillers"));
            }
        }
        for t in &self.templates {
            let pieces: Vec<&str> = t.split_whitespace().collect();
            if pieces.iter().filter(|&&p| p == ATTR_SLOT).count() != 1 {
                return bad(format!("template `{t}` must contain exactly one {ATTR_SLOT}"));
            }
            if pieces.contains(&FILL_SLOT) && self.fillers.is_empty() {
                return bad(format!("template `{t}` has filler slots but no fillers are defined"));
            }
            if let Some(p) = pieces.iter().find(|&&p| p != ATTR_SLOT && p != FILL_SLOT && !single(p)) {
                return bad(format!("template `{t}`: `{p}` is not a single lower-case token"));
            }
        }
        Ok(())
    }
}

fn builtin_fillers() -> BTreeMap<String, Vec<String>> {
    BUILTIN_FILLERS
        .iter()
        .map(|(t, ws)| (t.to_string(), ws.split_whitespace().map(String::from).collect()))
        .collect()
}

/// One generated twin: biased words, neutral words, slot index.
struct Twin {
    biased: Vec<String>,
    neutral: Vec<String>,
    slot: usize,
}

fn generate_twins(seed: u64, n: usize, lex: &Lexicon) -> Vec<Twin> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics: Vec<&String> = lex.fillers.keys().collect();
    (0..n)
        .map(|_| {
            let pair = &lex.pairs[rng.random_range(0..lex.pairs.len())];
            let template = &lex.templates[rng.random_range(0..lex.templates.len())];
            let mut biased = Vec::new();
            let mut neutral = Vec::new();
            let mut slot = 0;
            for (i, piece) in template.split_whitespace().enumerate() {
                let word = match piece {
                    ATTR_SLOT => {
                        slot = i;
                        biased.push(pair.biased.clone());
                        neutral.push(pair.neutral.clone());
                        continue;
                    }
                    FILL_SLOT => {
                        let own = pair.topic.as_ref().filter(|_| rng.random::<f64>() < lex.topic_affinity);
                        let topic = match own {
                            Some(t) => t,
                            None => topics[rng.random_range(0..topics.len())],
                        };
                        let words = &lex.fillers[topic];
                        words[rng.random_range(0..words.len())].clone()
                    }
                    w => w.to_string(),
                };
                biased.push(word.clone());
                neutral.push(word);
            }
            Twin { biased, neutral, slot }
        })
        .collect()
}

fn twins_to_examples(twins: &[Twin], vocab: &super::Vocabulary) -> Result<Vec<TextExample>> {
    let mut out = Vec::with_capacity(2 * twins.len());
    for t in twins {
        let b = tokenize(&t.biased.join(" "), vocab, DEFAULT_MAX_LEN)?;
        let n = tokenize(&t.neutral.join(" "), vocab, DEFAULT_MAX_LEN)?;
        out.push(TextExample {
            tokens: b,
            label: StyleLabel::Biased,
            gold_attribute_positions: Some(vec![t.slot]),
        });
        out.push(TextExample::new(n, StyleLabel::Neutral));
    }
    Ok(out)
}

fn vocab_for(twins: &[Twin]) -> Arc<super::Vocabulary> {
    let texts: Vec<String> = twins
        .iter()
        .flat_map(|t| [t.biased.join(" "), t.neutral.join(" ")])
        .collect();
    Arc::new(build_vocab(texts.iter().map(String::as_str), 1, usize::MAX))
}

/// Generates `n_per_class` biased sentences and their neutral twins. Example
/// `2i` is biased and `2i + 1` is its twin.
pub fn synthesize_corpus(seed: u64, n_per_class: usize, lexicon: &Lexicon) -> Result<Corpus> {
    if n_per_class < 1 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    lexicon.validate()?;
    let twins = generate_twins(seed, n_per_class, lexicon);
    let vocab = vocab_for(&twins);
    let examples = twins_to_examples(&twins, &vocab)?;
    Corpus::new(examples, Split::Train, vocab)
}

#[derive(Clone, Debug)]
pub struct SyntheticSplits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Train/dev/test corpora over one shared vocabulary. Twins never straddle
/// splits.
pub fn synthesize_splits(
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    lexicon: &Lexicon,
) -> Result<SyntheticSplits> {
    if n_train < 1 || n_dev < 1 || n_test < 1 {
        return Err(Error::InvalidArgument("every split needs at least one pair".into()));
    }
    lexicon.validate()?;
    let twins = generate_twins(seed, n_train + n_dev + n_test, lexicon);
    let vocab = vocab_for(&twins);
    let (tr, rest) = twins.split_at(n_train);
    let (dv, te) = rest.split_at(n_dev);
    let make = |ts: &[Twin], split| Corpus::new(twins_to_examples(ts, &vocab)?, split, vocab.clone());
    Ok(SyntheticSplits {
        train: make(tr, Split::Train)?,
        dev: make(dv, Split::Dev)?,
        test: make(te, Split::Test)?,
    })
}
