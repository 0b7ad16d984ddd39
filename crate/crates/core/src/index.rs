//! Exact maximum-inner-product search over document embeddings.

use std::cmp::Ordering;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::corpus::{Corpus, Query};
use crate::encoder::{encode_batch, Embedding, Parameters};
use crate::error::{Error, Result};
use crate::eval::Run;
use crate::tokenizer::{tokenize, Vocabulary};

const MAGIC: &[u8; 4] = b"DIDX";
const FORMAT_VERSION: u32 = 1;

/// Row-major `count × dim` matrix of document embeddings plus their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f32>,
}

impl DenseIndex {
    pub fn new(ids: Vec<String>, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("index dimension must be positive".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                actual: matrix.len(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index matrix".into()));
        }
        Ok(Self { ids, dim, matrix })
    }

    pub fn from_embeddings(ids: Vec<String>, embeddings: &[Embedding]) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Embedding::dim);
        if embeddings.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: embeddings.len(),
            });
        }
        let mut matrix = Vec::with_capacity(ids.len() * dim);
        for e in embeddings {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.dim(),
                });
            }
            matrix.extend(e.0.iter().map(|&v| v as f32));
        }
        Self::new(ids, dim, matrix)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Dot-product scores against every row, in row order.
    pub fn scores(&self, query: &Embedding) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if !query.is_finite() {
            return Err(Error::NonFinite("query embedding".into()));
        }
        let q = query.as_slice();
        Ok(self
            .matrix
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(q).map(|(&r, &x)| r as f64 * x).sum())
            .collect())
    }

    /// Top `min(k, len)` rows as `(row, score)`, best first; equal scores
    /// keep corpus order.
    pub fn search_rows(&self, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            // partial_cmp: -0.0 and +0.0 must tie
            b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0))
        };
        let k = k.min(ranked.len());
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k, by_rank);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(by_rank);
        Ok(ranked)
    }

    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .search_rows(query, k)?
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.ids.len() as u32);
        for id in &self.ids {
            w.str(id);
        }
        w.f32s(&self.matrix);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, FORMAT_VERSION)?;
        let dim = r.u32("dim")? as usize;
        let count = r.u32("count")? as usize;
        let ids = (0..count)
            .map(|_| r.str("document id"))
            .collect::<Result<Vec<_>>>()?;
        let matrix = r.f32s(count * dim, "matrix")?;
        r.finish()?;
        Self::new(ids, dim, matrix)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Encodes every document of `corpus` (in corpus order), `batch_size` at a
/// time. With `normalize`, rows are unit length and search ranks by cosine.
pub fn build_index(
    params: &Parameters,
    corpus: &Corpus,
    vocab: &Vocabulary,
    batch_size: usize,
    normalize: bool,
) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("cannot index an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let max_len = params.config().max_len;
    let mut embeddings = Vec::with_capacity(corpus.len());
    for chunk in corpus.documents().chunks(batch_size) {
        let batch: Vec<_> = chunk
            .iter()
            .map(|d| tokenize(vocab, &d.full_text(), max_len))
            .collect();
        let encoded = encode_batch(params, &batch).map_err(|e| match e {
            Error::Empty(_) => Error::Empty(format!(
                "a document in batch starting at `{}` has no in-vocabulary tokens",
                chunk[0].id
            )),
            other => other,
        })?;
        embeddings.extend(encoded.into_iter().map(|e| if normalize { e.normalized() } else { e }));
    }
    DenseIndex::from_embeddings(corpus.iter().map(|d| d.id.clone()).collect(), &embeddings)
}

/// Encodes `queries` and searches `index` for each, producing a run.
/// `normalize` must match how the index was built.
pub fn run_queries(
    index: &DenseIndex,
    params: &Parameters,
    vocab: &Vocabulary,
    queries: &[Query],
    k: usize,
    normalize: bool,
) -> Result<Run> {
    let max_len = params.config().max_len;
    let batch: Vec<_> = queries.iter().map(|q| tokenize(vocab, &q.text, max_len)).collect();
    if let Some(q) = queries.iter().zip(&batch).find(|(_, t)| t.is_empty()).map(|(q, _)| q) {
        return Err(Error::Empty(format!("query `{}` has no tokens", q.id)));
    }
    let encoded = encode_batch(params, &batch)?;
    let mut run = Run::new();
    for (q, e) in queries.iter().zip(encoded) {
        let e = if normalize { e.normalized() } else { e };
        run.insert(q.id.clone(), index.search(&e, k)?)?;
    }
    Ok(run)
}
