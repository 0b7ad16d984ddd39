//! Documents, queries and relevance judgments, plus batch sampling over one
//! or more document sources.
//!
//! Corpora and queries are JSONL with `_id`, optional `title` and `text`
//! keys; qrels are tab-separated `query-id corpus-id score` rows. Both are
//! the layouts used by the BEIR distribution.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title and body joined by a space, the text that gets encoded.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// An ordered, id-addressable collection of documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    pub source_label: String,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and blank texts.
    pub fn new(source_label: impl Into<String>, documents: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(Error::Empty(format!("document `{}` has no text", doc.id)));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            documents,
            by_id,
            source_label: source_label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.documents.iter()
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        docs.push(Document {
            id: rec.id,
            title: rec.title.unwrap_or_default(),
            text: rec.text,
        });
    }
    Ok(docs)
}

/// Loads a JSONL corpus, preserving file order. The source label is the
/// file stem.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let docs = read_jsonl(path)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Corpus::new(label, docs)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(corpus.documents(), path.as_ref())
}

fn write_jsonl(docs: &[Document], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A query to be run against a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Loads queries from the same JSONL layout as corpora (`_id`, `text`).
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let docs = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut queries = Vec::with_capacity(docs.len());
    for doc in docs {
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        queries.push(Query {
            id: doc.id,
            text: doc.text,
        });
    }
    Ok(queries)
}

pub fn write_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    let docs: Vec<Document> = queries
        .iter()
        .map(|q| Document::new(q.id.clone(), "", q.text.clone()))
        .collect();
    write_jsonl(&docs, path.as_ref())
}

/// Graded relevance judgments: query id -> doc id -> grade.
///
/// Pairs that are absent are grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a judgment; a repeated pair overwrites the earlier grade.
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Total number of stored (query, doc) judgments.
    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const QRELS_HEADER: &str = "query-id\tcorpus-id\tscore";

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (lineno == 0 && line == QRELS_HEADER) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let grade: u32 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("grade `{}` is not a non-negative integer", fields[2])))?;
        qrels.insert(fields[0], fields[1], grade);
    }
    Ok(qrels)
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{QRELS_HEADER}").map_err(io)?;
    for (q, docs) in &qrels.judgments {
        for (d, g) in docs {
            writeln!(out, "{q}\t{d}\t{g}").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Everything comes from the one source.
    Single,
    /// Every batch comes from a single source; sources alternate by batch.
    FiftyFifty,
    /// Documents are drawn uniformly over the union of all sources.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct SamplingStrategy {
    pub mode: SamplingMode,
    pub sources: Vec<Corpus>,
}

impl SamplingStrategy {
    pub fn new(mode: SamplingMode, sources: Vec<Corpus>) -> Result<Self> {
        match mode {
            SamplingMode::Single if sources.len() != 1 => {
                return Err(Error::InvalidArgument(format!(
                    "single sampling needs exactly 1 source, got {}",
                    sources.len()
                )))
            }
            SamplingMode::FiftyFifty if sources.len() != 2 => {
                return Err(Error::InvalidArgument(format!(
                    "fifty-fifty sampling needs exactly 2 sources, got {}",
                    sources.len()
                )))
            }
            SamplingMode::Uniform if sources.is_empty() => {
                return Err(Error::InvalidArgument("uniform sampling needs a source".into()))
            }
            _ => {}
        }
        if let Some(c) = sources.iter().find(|c| c.is_empty()) {
            return Err(Error::Empty(format!("source `{}` has no documents", c.source_label)));
        }
        Ok(Self { mode, sources })
    }

    pub fn single(corpus: Corpus) -> Result<Self> {
        Self::new(SamplingMode::Single, vec![corpus])
    }

    pub fn total_documents(&self) -> usize {
        self.sources.iter().map(Corpus::len).sum()
    }
}

/// Stateful batch sampler; the state is the batch counter used for
/// fifty-fifty alternation.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    strategy: &'a SamplingStrategy,
    batches_drawn: u64,
    first_source: Option<usize>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(strategy: &'a SamplingStrategy) -> Self {
        Self {
            strategy,
            batches_drawn: 0,
            first_source: None,
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &mut self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Document>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let sources = &self.strategy.sources;
        if let Some(c) = sources.iter().find(|c| c.is_empty()) {
            return Err(Error::Empty(format!("source `{}` has no documents", c.source_label)));
        }
        if sources.is_empty() {
            return Err(Error::Empty("no sampling sources".into()));
        }
        let batch = match self.strategy.mode {
            SamplingMode::Single => draw_from(&sources[0], batch_size, rng),
            SamplingMode::FiftyFifty => {
                let first = *self.first_source.get_or_insert_with(|| rng.gen_range(0..2));
                let which = (first + (self.batches_drawn % 2) as usize) % 2;
                draw_from(&sources[which], batch_size, rng)
            }
            SamplingMode::Uniform => {
                let total = self.strategy.total_documents();
                (0..batch_size)
                    .map(|_| {
                        let mut i = rng.gen_range(0..total);
                        let mut chosen = None;
                        for c in sources {
                            if i < c.len() {
                                chosen = Some(&c.documents()[i]);
                                break;
                            }
                            i -= c.len();
                        }
                        chosen.expect("index within union")
                    })
                    .collect()
            }
        };
        self.batches_drawn += 1;
        Ok(batch)
    }
}

fn draw_from<'a, R: Rng + ?Sized>(corpus: &'a Corpus, n: usize, rng: &mut R) -> Vec<&'a Document> {
    (0..n)
        .map(|_| &corpus.documents()[rng.gen_range(0..corpus.len())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn corpus(label: &str, ids: &[&str]) -> Corpus {
        let docs = ids.iter().map(|id| Document::new(*id, "", format!("text of {id}"))).collect();
        Corpus::new(label, docs).unwrap()
    }

    #[test]
    fn loads_in_file_order() {
        let f = write_tmp(
            "{\"_id\":\"d1\",\"text\":\"one\"}\n{\"_id\":\"d2\",\"title\":\"T\",\"text\":\"two\"}\n{\"_id\":\"d3\",\"text\":\"three\"}\n",
        );
        let c = load_corpus(f.path()).unwrap();
        let ids: Vec<_> = c.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
        assert_eq!(c.get("d2").unwrap().title, "T");
        assert_eq!(c.position("d3"), Some(2));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp("{\"_id\":\"d1\",\"text\":\"a\"}\n{\"_id\":\"d1\",\"text\":\"b\"}\n");
        match load_corpus(f.path()) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "d1"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_tmp("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_tmp("{\"_id\":\"d1\",\"text\":\"a\"}\n{not json}\n");
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_text_rejected() {
        let f = write_tmp("{\"_id\":\"d1\",\"text\":\"   \"}\n");
        assert!(matches!(load_corpus(f.path()), Err(Error::Empty(_))));
    }

    #[test]
    fn qrels_parsing() {
        let f = write_tmp("q1\td1\t1\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.grade("q1", "d1"), 1);
        assert_eq!(q.grade("q1", "d9"), 0);

        let f = write_tmp("query-id\tcorpus-id\tscore\nq1\td1\t1\nq2\td3\t2\n");
        assert_eq!(load_qrels(f.path()).unwrap().len(), 2);

        let f = write_tmp("q1\td1\t1\nq1\td1\t2\n");
        assert_eq!(load_qrels(f.path()).unwrap().grade("q1", "d1"), 2);

        let f = write_tmp("q1\td1\t1\nq1\td2\thigh\n");
        match load_qrels(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn single_source_batch() {
        let s = SamplingStrategy::single(corpus("a", &["d1"])).unwrap();
        let mut sampler = BatchSampler::new(&s);
        let batch = sampler.sample_batch(4, &mut seeded_rng(1)).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|d| d.id == "d1"));
    }

    #[test]
    fn fifty_fifty_alternates() {
        let a = corpus("a", &["a1", "a2", "a3"]);
        let b = corpus("b", &["b1", "b2"]);
        let s = SamplingStrategy::new(SamplingMode::FiftyFifty, vec![a, b]).unwrap();
        let mut sampler = BatchSampler::new(&s);
        let mut rng = seeded_rng(7);
        let mut firsts = Vec::new();
        for _ in 0..6 {
            let batch = sampler.sample_batch(8, &mut rng).unwrap();
            let src = &batch[0].id[..1];
            assert!(batch.iter().all(|d| &d.id[..1] == src), "batch mixes sources");
            firsts.push(src.to_string());
        }
        for w in firsts.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn fifty_fifty_needs_two_sources() {
        let a = corpus("a", &["a1"]);
        assert!(SamplingStrategy::new(SamplingMode::FiftyFifty, vec![a]).is_err());
    }

    #[test]
    fn uniform_weights_by_size() {
        let ids_a: Vec<String> = (0..9).map(|i| format!("a{i}")).collect();
        let ids_a: Vec<&str> = ids_a.iter().map(String::as_str).collect();
        let a = corpus("a", &ids_a);
        let b = corpus("b", &["b0"]);
        let s = SamplingStrategy::new(SamplingMode::Uniform, vec![a, b]).unwrap();
        let mut sampler = BatchSampler::new(&s);
        let mut rng = seeded_rng(3);
        let draws = sampler.sample_batch(10_000, &mut rng).unwrap();
        let from_b = draws.iter().filter(|d| d.id.starts_with('b')).count() as f64 / 10_000.0;
        assert!((0.07..=0.13).contains(&from_b), "fraction from b = {from_b}");

        // chi-square over all 10 documents, 9 dof; critical value at p = 0.01 is 21.666
        let mut counts = std::collections::HashMap::new();
        for d in &draws {
            *counts.entry(d.id.clone()).or_insert(0usize) += 1;
        }
        let expected = 1_000.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert_eq!(counts.len(), 10);
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = corpus("a", &["a1", "a2", "a3", "a4"]);
        let s = SamplingStrategy::single(a).unwrap();
        let draw = |seed| {
            let mut sampler = BatchSampler::new(&s);
            let mut rng = seeded_rng(seed);
            (0..5)
                .flat_map(|_| sampler.sample_batch(3, &mut rng).unwrap())
                .map(|d| d.id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn zero_batch_rejected() {
        let s = SamplingStrategy::single(corpus("a", &["d1"])).unwrap();
        assert!(BatchSampler::new(&s).sample_batch(0, &mut seeded_rng(0)).is_err());
    }

    proptest! {
        #[test]
        fn corpus_round_trips(texts in proptest::collection::vec(("[a-z]{0,6}", "\\PC*[a-zA-Z]\\PC*"), 0..8)) {
            let docs: Vec<Document> = texts
                .into_iter()
                .enumerate()
                .map(|(i, (title, text))| Document::new(format!("doc-{i}"), title, text))
                .collect();
            let c = Corpus::new("rt", docs).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            write_corpus(&c, f.path()).unwrap();
            let back = load_corpus(f.path()).unwrap();
            prop_assert_eq!(back.documents(), c.documents());
        }
    }
}
