//! Topic-structured synthetic corpora and crop queries over them.
//!
//! Every topic owns a disjoint set of pseudo-words; a shared background
//! vocabulary is common to all topics. Word choice within either set is
//! Zipfian, so documents of one topic overlap lexically without being
//! copies of each other.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Qrels, Query};
use crate::error::{Error, Result};
use crate::seeded_rng;

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ou", "ei"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub label: String,
    pub num_docs: usize,
    pub num_topics: usize,
    /// Global index of the first topic; sources with different offsets use
    /// disjoint topic vocabularies.
    pub topic_offset: usize,
    pub words_per_topic: usize,
    pub shared_words: usize,
    pub doc_len: usize,
    /// Probability that a word is drawn from the document's topic.
    pub topic_fraction: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            label: "synthetic".into(),
            num_docs: 1000,
            num_topics: 20,
            topic_offset: 0,
            words_per_topic: 60,
            shared_words: 200,
            doc_len: 64,
            topic_fraction: 0.6,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic corpus: {m}")));
        if self.num_docs == 0 || self.num_topics == 0 {
            return bad("num_docs and num_topics must be positive");
        }
        if self.words_per_topic == 0 || self.doc_len == 0 {
            return bad("words_per_topic and doc_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) {
            return bad("topic_fraction must lie in [0, 1]");
        }
        if self.topic_fraction < 1.0 && self.shared_words == 0 {
            return bad("shared_words must be positive when topic_fraction < 1");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        Ok(())
    }

    /// Topic index of document `i`, before the offset.
    pub fn topic_of(&self, i: usize) -> usize {
        i % self.num_topics
    }
}

/// Pronounceable word for a non-negative index, unique per index.
pub fn pseudo_word(mut index: usize) -> String {
    let mut out = String::new();
    // at least two syllables so words never collide with short English tokens
    for _ in 0..2 {
        out.push_str(ONSETS[index % ONSETS.len()]);
        index /= ONSETS.len();
        out.push_str(NUCLEI[index % NUCLEI.len()]);
        index /= NUCLEI.len();
    }
    while index > 0 {
        index -= 1;
        out.push_str(ONSETS[index % ONSETS.len()]);
        index /= ONSETS.len();
        out.push_str(NUCLEI[index % NUCLEI.len()]);
        index /= NUCLEI.len();
    }
    out
}

fn zipf(n: usize, s: f64) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s)))
        .map_err(|e| Error::InvalidArgument(format!("zipf weights: {e}")))
}

/// Word index of topic word `j` of global topic `t`; shared words come first.
fn topic_word(cfg: &SyntheticConfig, t: usize, j: usize) -> usize {
    cfg.shared_words + t * cfg.words_per_topic + j
}

/// Generates the corpus. Document `i` has id `{label}-{i}`, belongs to
/// topic `topic_offset + i % num_topics`, and is titled after its topic.
pub fn generate(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let topic_dist = zipf(cfg.words_per_topic, cfg.zipf_exponent)?;
    let shared_dist = if cfg.shared_words > 0 {
        Some(zipf(cfg.shared_words, cfg.zipf_exponent)?)
    } else {
        None
    };
    let docs = (0..cfg.num_docs)
        .map(|i| {
            let t = cfg.topic_offset + cfg.topic_of(i);
            let words: Vec<String> = (0..cfg.doc_len)
                .map(|_| {
                    let idx = match &shared_dist {
                        Some(shared) if !rng.gen_bool(cfg.topic_fraction) => shared.sample(&mut rng),
                        _ => topic_word(cfg, t, topic_dist.sample(&mut rng)),
                    };
                    pseudo_word(idx)
                })
                .collect();
            Document::new(format!("{}-{i}", cfg.label), "", words.join(" "))
        })
        .collect();
    Corpus::new(cfg.label.clone(), docs)
}

/// Picks `n` distinct documents and turns a random contiguous crop of each
/// into a query whose single relevant document is its source. Crop length
/// is uniform in `[ceil(min_ratio·len), floor(max_ratio·len)]` words.
pub fn crop_queries(
    corpus: &Corpus,
    n: usize,
    min_ratio: f64,
    max_ratio: f64,
    seed: u64,
) -> Result<(Vec<Query>, Qrels)> {
    if n == 0 || n > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} queries from a corpus of {} documents",
            corpus.len()
        )));
    }
    if !(0.0 < min_ratio && min_ratio <= max_ratio && max_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "crop ratios must satisfy 0 < min <= max <= 1, got {min_ratio}, {max_ratio}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let picks = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    let mut queries = Vec::with_capacity(n);
    let mut qrels = Qrels::new();
    for (qi, di) in picks.into_iter().enumerate() {
        let doc = &corpus.documents()[di];
        let words: Vec<&str> = doc.text.split_whitespace().collect();
        let len = words.len();
        let lo = ((min_ratio * len as f64).ceil() as usize).max(1);
        let hi = ((max_ratio * len as f64).floor() as usize).clamp(lo, len);
        let span = rng.gen_range(lo..=hi);
        let start = rng.gen_range(0..=len - span);
        let id = format!("q{qi}");
        qrels.insert(id.clone(), doc.id.clone(), 1);
        queries.push(Query {
            id,
            text: words[start..start + span].join(" "),
        });
    }
    Ok((queries, qrels))
}
