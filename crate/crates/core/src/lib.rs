//! Unsupervised dense retrieval with contrastive learning.
//!
//! The crate contains everything needed to train and evaluate a small
//! transformer bi-encoder without labelled data:
//!
//! - [`corpus`]: JSONL corpora, queries, TSV qrels and multi-source batch sampling
//! - [`tokenizer`]: word-level vocabulary and tokenization
//! - [`augment`]: positive pairs from a single document (inverse cloze task,
//!   independent cropping, word deletion / replacement / masking)
//! - [`encoder`]: pre-norm transformer with mean pooling and hand-written
//!   reverse-mode gradients
//! - [`contrastive`]: InfoNCE, SimCLR and MoCo training, AdamW, supervised
//!   fine-tuning with hard-negative mining
//! - [`index`]: exact dot-product search over document embeddings
//! - [`bm25`]: inverted index with Okapi BM25 ranking
//! - [`eval`]: TREC runs, nDCG@k, Recall@k and system comparison tables
//! - [`synthetic`]: topic-structured synthetic corpora for desk-scale experiments

pub mod augment;
mod binio;
pub mod bm25;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod synthetic;
pub mod tokenizer;

pub use augment::{PairKind, PairStrategy, Span};
pub use bm25::{Bm25Params, InvertedIndex};
pub use contrastive::{
    AdamWConfig, Framework, InfoNceConfig, MoCoState, OptimizerState, PretrainConfig,
};
pub use corpus::{Corpus, Document, Qrels, Query, SamplingMode, SamplingStrategy};
pub use encoder::{Embedding, EncoderConfig, Gradients, Parameters};
pub use error::{Error, Result};
pub use eval::{MetricReport, Run};
pub use index::DenseIndex;
pub use tokenizer::{TokenSequence, Vocabulary};

/// The random generator used everywhere; ChaCha keeps streams identical
/// across platforms for a given seed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
