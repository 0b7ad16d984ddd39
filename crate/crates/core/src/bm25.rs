//! Okapi BM25 over an in-memory inverted index.
//!
//! score(D, Q) = Σ_t idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|D|/avgdl))
//! idf(t)      = ln((N − df + 0.5) / (df + 0.5) + 1)
//!
//! The `+ 1` inside the logarithm keeps idf positive for terms that occur in
//! more than half of the documents.
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, Vocabulary, UNK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    /// Postings sorted by document position.
    postings: BTreeMap<String, Vec<Posting>>,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

pub fn idf(num_docs: usize, doc_freq: usize) -> f64 {
    let (n, df) = (num_docs as f64, doc_freq as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// In-vocabulary terms of a text; unknown words are dropped.
pub fn query_terms(vocab: &Vocabulary, text: &str) -> Vec<String> {
    tokenize(vocab, text, usize::MAX)
        .ids()
        .iter()
        .filter(|&&id| id != UNK_ID)
        .map(|&id| vocab.token(id).expect("tokenize yields known ids").to_string())
        .collect()
}

pub fn build_inverted(corpus: &Corpus, vocab: &Vocabulary) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("cannot index an empty corpus".into()));
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lens = Vec::with_capacity(corpus.len());
    for (pos, doc) in corpus.iter().enumerate() {
        let terms = query_terms(vocab, &doc.full_text());
        doc_lens.push(terms.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting {
                doc: pos as u32,
                tf: count,
            });
        }
    }
    let avgdl = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64;
    let doc_ids = corpus.iter().map(|d| d.id.clone()).collect();
    Ok(InvertedIndex::assemble(doc_ids, doc_lens, avgdl, postings))
}

impl InvertedIndex {
    fn assemble(
        doc_ids: Vec<String>,
        doc_lens: Vec<u32>,
        avgdl: f64,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let positions = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            doc_ids,
            doc_lens,
            avgdl,
            postings,
            positions,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.positions.get(doc_id).map(|&i| self.doc_lens[i])
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn term_weight(&self, tf: u32, doc_pos: usize, df: usize, params: &Bm25Params) -> f64 {
        let tf = tf as f64;
        let dl = self.doc_lens[doc_pos] as f64;
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        let norm = params.k1 * (1.0 - params.b + params.b * dl / avgdl);
        idf(self.num_docs(), df) * tf * (params.k1 + 1.0) / (tf + norm)
    }

    /// BM25 score of one document; query terms are summed in the order given.
    pub fn score<S: AsRef<str>>(&self, query_terms: &[S], doc_id: &str, params: &Bm25Params) -> Result<f64> {
        let pos = *self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        let mut total = 0.0;
        for term in query_terms {
            let list = self.postings(term.as_ref());
            if let Ok(i) = list.binary_search_by_key(&(pos as u32), |p| p.doc) {
                total += self.term_weight(list[i].tf, pos, list.len(), params);
            }
        }
        Ok(total)
    }

    /// Top-k documents sharing at least one term with the query, best
    /// first, ties in corpus order.
    pub fn search<S: AsRef<str>>(&self, query_terms: &[S], k: usize, params: &Bm25Params) -> Vec<(String, f64)> {
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in query_terms {
            let list = self.postings(term.as_ref());
            for p in list {
                *scores.entry(p.doc).or_insert(0.0) +=
                    self.term_weight(p.tf, p.doc as usize, list.len(), params);
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(pos, s)| (self.doc_ids[pos as usize].clone(), s))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).expect("index serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: InvertedIndex = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if raw.doc_ids.len() != raw.doc_lens.len() {
            return Err(Error::Format("document id and length tables differ".into()));
        }
        Ok(Self::assemble(raw.doc_ids, raw.doc_lens, raw.avgdl, raw.postings))
    }
}

pub fn bm25_score<S: AsRef<str>>(
    idx: &InvertedIndex,
    query_terms: &[S],
    doc_id: &str,
    params: &Bm25Params,
) -> Result<f64> {
    idx.score(query_terms, doc_id, params)
}

pub fn bm25_search<S: AsRef<str>>(
    idx: &InvertedIndex,
    query_terms: &[S],
    k: usize,
    params: &Bm25Params,
) -> Vec<(String, f64)> {
    idx.search(query_terms, k, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn corpus(texts: &[&str]) -> Corpus {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{}", i + 1), "", *t))
            .collect();
        Corpus::new("t", docs).unwrap()
    }

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(words.iter().copied()).unwrap()
    }

    #[test]
    fn postings_and_statistics() {
        let idx = build_inverted(&corpus(&["a b", "b"]), &vocab(&["a", "b"])).unwrap();
        assert_eq!(idx.postings("a"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.postings("b"), &[Posting { doc: 0, tf: 1 }, Posting { doc: 1, tf: 1 }]);
        assert_eq!(idx.avgdl(), 1.5);
        assert_eq!(idx.num_docs(), 2);
    }

    #[test]
    fn all_unknown_document_has_zero_length() {
        let idx = build_inverted(&corpus(&["zzz yyy", "a a"]), &vocab(&["a"])).unwrap();
        assert_eq!(idx.doc_len("d1"), Some(0));
        assert_eq!(idx.avgdl(), 1.0);
        assert!(build_inverted(&Corpus::new("e", vec![]).unwrap(), &vocab(&["a"])).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn hand_evaluated_single_term() {
        // N = 2, df = 1, tf = 1, dl = avgdl: idf = ln 2 and the tf factor is 1
        let idx = build_inverted(&corpus(&["a", "b"]), &vocab(&["a", "b"])).unwrap();
        let s = bm25_score(&idx, &["a"], "d1", &Bm25Params::default()).unwrap();
        assert!((s - 0.6931).abs() < 1e-4, "{s}");
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let idx = build_inverted(&corpus(&["a", "b"]), &vocab(&["a", "b"])).unwrap();
        assert_eq!(bm25_score(&idx, &["b"], "d1", &Bm25Params::default()).unwrap(), 0.0);
        assert!(bm25_score(&idx, &["a"], "d9", &Bm25Params::default()).is_err());
    }

    #[test]
    fn increasing_in_term_frequency() {
        // equal lengths so only tf changes
        let idx = build_inverted(
            &corpus(&["a c c c", "a a c c", "a a a c", "b b b b"]),
            &vocab(&["a", "b", "c"]),
        )
        .unwrap();
        let p = Bm25Params::default();
        let s: Vec<f64> = ["d1", "d2", "d3"].iter().map(|d| bm25_score(&idx, &["a"], d, &p).unwrap()).collect();
        assert!(s[0] < s[1] && s[1] < s[2]);
    }

    #[test]
    fn search_edge_cases() {
        let v = vocab(&["a", "b", "c"]);
        let idx = build_inverted(&corpus(&["a b", "b c", "c"]), &v).unwrap();
        let p = Bm25Params::default();
        assert!(bm25_search(&idx, &query_terms(&v, "zz qq"), 10, &p).is_empty());
        assert_eq!(bm25_search(&idx, &["a"], 10, &p).len(), 1);
        assert_eq!(bm25_search(&idx, &["b", "c"], 10, &p).len(), 3);
    }

    #[test]
    fn search_matches_exhaustive_scoring() {
        let words = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];
        let v = vocab(&words);
        let mut rng = seeded_rng(20);
        let texts: Vec<String> = (0..20)
            .map(|_| {
                let n = rng.gen_range(1..12);
                (0..n).map(|_| *words.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let c = corpus(&texts.iter().map(String::as_str).collect::<Vec<_>>());
        let idx = build_inverted(&c, &v).unwrap();
        let p = Bm25Params::default();
        for _ in 0..25 {
            let q: Vec<&str> = (0..rng.gen_range(1..4)).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let mut oracle: Vec<(usize, f64)> = c
                .iter()
                .enumerate()
                .filter(|(_, d)| query_terms(&v, &d.text).iter().any(|t| q.contains(&t.as_str())))
                .map(|(i, d)| (i, bm25_score(&idx, &q, &d.id, &p).unwrap()))
                .collect();
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let got = bm25_search(&idx, &q, 20, &p);
            assert_eq!(got.len(), oracle.len());
            for ((gid, gs), (oi, os)) in got.iter().zip(&oracle) {
                assert!((gs - os).abs() <= 1e-9);
                assert!(*gs > 0.0);
                if gid != &c.documents()[*oi].id {
                    // only acceptable when the two scores are exactly tied
                    assert_eq!(*gs, *os);
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let v = vocab(&["a", "b"]);
        let idx = build_inverted(&corpus(&["a b b", "b"]), &v).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        idx.save(f.path()).unwrap();
        let back = InvertedIndex::load(f.path()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.score(&["b"], "d2", &Bm25Params::default()).unwrap(), idx.score(&["b"], "d2", &Bm25Params::default()).unwrap());
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_term_permutation(seed in any::<u64>()) {
            let words = ["a", "b", "c", "d", "e"];
            let v = vocab(&words);
            let mut rng = seeded_rng(seed);
            let texts: Vec<String> = (0..8)
                .map(|_| (0..rng.gen_range(1..8)).map(|_| *words.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
                .collect();
            let idx = build_inverted(&corpus(&texts.iter().map(String::as_str).collect::<Vec<_>>()), &v).unwrap();
            let mut q: Vec<&str> = (0..3).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let p = Bm25Params::default();
            let before = bm25_search(&idx, &q, 8, &p);
            q.reverse();
            let after = bm25_search(&idx, &q, 8, &p);
            prop_assert_eq!(before.len(), after.len());
            for (x, y) in before.iter().zip(&after) {
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
            prop_assert!(before.iter().all(|(_, s)| *s > 0.0));
        }

        #[test]
        fn rebuild_after_adding_document_matches_fresh_statistics(seed in any::<u64>()) {
            let words = ["a", "b", "c", "d"];
            let v = vocab(&words);
            let mut rng = seeded_rng(seed);
            let mut texts: Vec<String> = (0..6)
                .map(|_| (0..rng.gen_range(1..6)).map(|_| *words.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
                .collect();
            texts.push("d d d".into());
            let idx = build_inverted(&corpus(&texts.iter().map(String::as_str).collect::<Vec<_>>()), &v).unwrap();
            let lens: Vec<f64> = texts.iter().map(|t| t.split(' ').count() as f64).collect();
            prop_assert!((idx.avgdl() - lens.iter().sum::<f64>() / lens.len() as f64).abs() < 1e-12);
            for w in words {
                let total: u32 = idx.postings(w).iter().map(|p| p.tf).sum();
                let expect = texts.iter().flat_map(|t| t.split(' ')).filter(|x| *x == w).count() as u32;
                prop_assert_eq!(total, expect);
                prop_assert!(idx.postings(w).windows(2).all(|p| p[0].doc < p[1].doc));
            }
        }
    }
}
