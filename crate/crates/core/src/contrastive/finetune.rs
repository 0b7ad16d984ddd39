use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Qrels, Query};
use crate::encoder::{encode_batch, Parameters, Tape};
use crate::error::{Error, Result};
use crate::eval::ndcg_at_k;
use crate::index::{build_index, run_queries};
use crate::seeded_rng;
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary};

use super::{
    adamw_update, batch_info_nce, score_vectors, to_embedding_grads, AdamWConfig, InfoNceConfig, MetricsRow,
    OptimizerState,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query: String,
    /// Id of the gold document.
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub info_nce: InfoNceConfig,
    pub optimizer: AdamWConfig,
    /// Chance that a query's extra document is its mined hard negative
    /// rather than a random one, when hard negatives are given.
    pub hard_negative_prob: f64,
    /// Dev evaluation period in steps.
    pub eval_every: usize,
    /// Stop after this many dev evaluations without improvement.
    pub patience: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            info_nce: InfoNceConfig::default(),
            optimizer: AdamWConfig::default(),
            hard_negative_prob: 0.1,
            eval_every: 100,
            patience: 3,
            log_every: 10,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.info_nce.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::NoNegatives(format!("fine-tuning needs a batch of at least 2, got {}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_prob) {
            return Err(Error::InvalidArgument(format!(
                "hard_negative_prob must lie in [0, 1], got {}",
                self.hard_negative_prob
            )));
        }
        if self.eval_every == 0 || self.log_every == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "eval_every, log_every and patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Held-out queries for early stopping on nDCG@10.
#[derive(Debug, Clone, Copy)]
pub struct DevSplit<'a> {
    pub queries: &'a [Query],
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// The final parameters, or the best on the dev split when one is given.
    pub params: Parameters,
    pub metrics: Vec<MetricsRow>,
    /// Dev nDCG@10 per evaluation, as (step, value).
    pub dev_history: Vec<(usize, f64)>,
}

/// One fine-tuning batch: `B` queries, their `B` gold documents followed by
/// one extra document each, and per query the candidate documents with the
/// gold first.
#[derive(Debug, Clone)]
pub struct FinetuneBatch {
    pub queries: Vec<TokenSequence>,
    pub docs: Vec<TokenSequence>,
    pub doc_ids: Vec<String>,
    pub candidates: Vec<Vec<usize>>,
}

struct PairIndex<'a> {
    golds: HashMap<&'a str, HashSet<&'a str>>,
}

impl<'a> PairIndex<'a> {
    fn new(pairs: &'a [TrainingPair], corpus: &Corpus) -> Result<Self> {
        let mut golds: HashMap<&str, HashSet<&str>> = HashMap::new();
        for p in pairs {
            if corpus.get(&p.positive).is_none() {
                return Err(Error::UnknownDocument(p.positive.clone()));
            }
            golds.entry(&p.query).or_default().insert(&p.positive);
        }
        Ok(Self { golds })
    }

    fn is_gold(&self, query: &str, doc: &str) -> bool {
        self.golds.get(query).is_some_and(|g| g.contains(doc))
    }
}

fn random_negative<'c, R: Rng + ?Sized>(
    corpus: &'c Corpus,
    index: &PairIndex<'_>,
    query: &str,
    rng: &mut R,
) -> Result<&'c str> {
    let golds = index.golds.get(query).map_or(0, HashSet::len);
    if corpus.len() <= golds {
        return Err(Error::InvalidArgument(format!(
            "every corpus document is gold for query `{query}`"
        )));
    }
    loop {
        let d = &corpus.documents()[rng.gen_range(0..corpus.len())];
        if !index.is_gold(query, &d.id) {
            return Ok(&d.id);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_batch_with<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    index: &PairIndex<'_>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
    hard_negatives: Option<&BTreeMap<String, String>>,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneBatch> {
    let b = cfg.batch_size.min(pairs.len());
    let chosen: Vec<&TrainingPair> = rand::seq::index::sample(rng, pairs.len(), b)
        .into_iter()
        .map(|i| &pairs[i])
        .collect();
    let mut doc_ids: Vec<String> = chosen.iter().map(|p| p.positive.clone()).collect();
    for p in &chosen {
        let hard = hard_negatives
            .and_then(|h| h.get(&p.query))
            .filter(|_| rng.gen_bool(cfg.hard_negative_prob));
        let neg = match hard {
            Some(h) => h.clone(),
            None => random_negative(corpus, index, &p.query, rng)?.to_string(),
        };
        doc_ids.push(neg);
    }
    let candidates = chosen
        .iter()
        .enumerate()
        .map(|(i, p)| {
            std::iter::once(i)
                .chain((0..doc_ids.len()).filter(|&j| j != i && !index.is_gold(&p.query, &doc_ids[j])))
                .collect()
        })
        .collect();
    let docs = doc_ids
        .iter()
        .map(|id| {
            let d = corpus.get(id).ok_or_else(|| Error::UnknownDocument(id.clone()))?;
            Ok(tokenize(vocab, &d.full_text(), max_len))
        })
        .collect::<Result<_>>()?;
    let queries = chosen.iter().map(|p| tokenize(vocab, &p.query, max_len)).collect();
    Ok(FinetuneBatch {
        queries,
        docs,
        doc_ids,
        candidates,
    })
}

/// Draws one batch as fine-tuning does. Documents that are gold for a query
/// never count among its negatives.
pub fn sample_finetune_batch<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
    hard_negatives: Option<&BTreeMap<String, String>>,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneBatch> {
    cfg.validate()?;
    let index = PairIndex::new(pairs, corpus)?;
    sample_batch_with(pairs, &index, corpus, vocab, max_len, hard_negatives, cfg, rng)
}

fn dev_ndcg(params: &Parameters, corpus: &Corpus, vocab: &Vocabulary, dev: &DevSplit<'_>, normalize: bool) -> Result<f64> {
    let index = build_index(params, corpus, vocab, 64, normalize)?;
    let run = run_queries(&index, params, vocab, dev.queries, 10, normalize)?;
    Ok(ndcg_at_k(&run, dev.qrels, 10)?.mean)
}

/// Supervised contrastive fine-tuning with in-batch negatives: every
/// document of the batch other than the query's gold is a negative, and
/// gradients flow through both towers.
pub fn finetune(
    params: Parameters,
    pairs: &[TrainingPair],
    corpus: &Corpus,
    vocab: &Vocabulary,
    hard_negatives: Option<&BTreeMap<String, String>>,
    dev: Option<DevSplit<'_>>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument("fine-tuning needs at least 2 documents".into()));
    }
    let index = PairIndex::new(pairs, corpus)?;
    if let Some(h) = hard_negatives {
        if let Some(missing) = h.values().find(|d| corpus.get(d).is_none()) {
            return Err(Error::UnknownDocument(missing.clone()));
        }
    }
    let max_len = params.config().max_len;
    if let Some(p) = pairs.iter().find(|p| tokenize(vocab, &p.query, max_len).is_empty()) {
        return Err(Error::Empty(format!("query `{}` has no tokens", p.query)));
    }

    let normalize = cfg.info_nce.normalize;
    let mut rng = seeded_rng(cfg.seed);
    let mut optimizer = OptimizerState::new(cfg.optimizer, &params)?;
    let mut params = params;
    let mut metrics = Vec::new();
    let mut dev_history = Vec::new();
    let mut best: Option<(f64, Parameters)> = None;
    let mut stale = 0;
    if let Some(d) = &dev {
        let v = dev_ndcg(&params, corpus, vocab, d, normalize)?;
        dev_history.push((0, v));
        best = Some((v, params.clone()));
    }
    let (mut window_loss, mut window_len) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let batch = sample_batch_with(pairs, &index, corpus, vocab, max_len, hard_negatives, cfg, &mut rng)?;
        let b = batch.queries.len();
        let views: Vec<TokenSequence> = batch.queries.into_iter().chain(batch.docs).collect();
        let (loss, grads) = {
            let tape = Tape::forward(&params, &views)?;
            let vectors = score_vectors(&tape, normalize);
            let slices: Vec<&[f64]> = vectors.iter().map(|e| e.as_slice()).collect();
            let (q, k) = slices.split_at(b);
            let bl = batch_info_nce(q, k, &batch.candidates, cfg.info_nce.temperature)?;
            let upstream: Vec<Vec<f64>> = bl.d_queries.into_iter().chain(bl.d_keys).collect();
            let upstream = to_embedding_grads(&tape, upstream, normalize);
            (bl.loss, tape.backward(&upstream)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
        }
        adamw_update(&mut params, &grads, &mut optimizer)?;
        window_loss += loss;
        window_len += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            metrics.push(MetricsRow {
                step,
                loss: window_loss / window_len as f64,
                queue_fill: 0,
                wall_ms: 0,
            });
            window_loss = 0.0;
            window_len = 0;
        }
        if let Some(d) = &dev {
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let v = dev_ndcg(&params, corpus, vocab, d, normalize)?;
                dev_history.push((step, v));
                log::info!("step {step} dev ndcg@10 {v:.4}");
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        log::info!("early stop at step {step}");
                        break;
                    }
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        params: best.map_or(params, |(_, p)| p),
        metrics,
        dev_history,
    })
}

/// For each distinct query, the highest-scoring document that is not one of
/// its gold documents. `top_k` bounds the first retrieval; when every
/// retrieved document is gold the search is widened to the whole corpus.
pub fn mine_hard_negatives(
    params: &Parameters,
    pairs: &[TrainingPair],
    corpus: &Corpus,
    vocab: &Vocabulary,
    top_k: usize,
    normalize: bool,
) -> Result<BTreeMap<String, String>> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument("mining needs at least 2 documents".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let index = PairIndex::new(pairs, corpus)?;
    let dense = build_index(params, corpus, vocab, 64, normalize)?;
    let queries: Vec<&str> = {
        let mut seen = HashSet::new();
        pairs.iter().map(|p| p.query.as_str()).filter(|q| seen.insert(*q)).collect()
    };
    let max_len = params.config().max_len;
    let seqs: Vec<TokenSequence> = queries.iter().map(|q| tokenize(vocab, q, max_len)).collect();
    let embeddings = encode_batch(params, &seqs)?;
    let mut out = BTreeMap::new();
    for (q, e) in queries.iter().zip(embeddings) {
        let e = if normalize { e.normalized() } else { e };
        let pick = |k: usize| -> Result<Option<String>> {
            Ok(dense
                .search(&e, k)?
                .into_iter()
                .map(|(d, _)| d)
                .find(|d| !index.is_gold(q, d)))
        };
        let neg = match pick(top_k)? {
            Some(d) => Some(d),
            None => pick(corpus.len())?,
        };
        if let Some(d) = neg {
            out.insert(q.to_string(), d);
        }
    }
    Ok(out)
}
