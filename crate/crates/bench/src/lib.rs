//! Shared fixtures for the benchmarks.

use densecrab_core::synthetic::{generate, SyntheticConfig};
use densecrab_core::tokenizer::build_vocab;
use densecrab_core::{seeded_rng, Corpus, EncoderConfig, Parameters, Vocabulary};

pub struct Fixture {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub params: Parameters,
}

/// A synthetic corpus of `num_docs` documents and an untrained encoder of
/// width `dim` sized to its vocabulary.
pub fn fixture(num_docs: usize, dim: usize) -> Fixture {
    let corpus = generate(&SyntheticConfig {
        num_docs,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config");
    let vocab = build_vocab(&corpus, 4096).expect("non-empty corpus");
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: dim,
        num_layers: 2,
        num_heads: 4,
        feedforward_dim: 2 * dim,
        max_len: 64,
    };
    let params = Parameters::init(cfg, &mut seeded_rng(0)).expect("valid encoder config");
    Fixture { corpus, vocab, params }
}
