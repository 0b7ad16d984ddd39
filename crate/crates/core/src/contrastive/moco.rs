use crate::encoder::{encode_batch, Embedding, Parameters, Tape};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

use super::simclr::in_batch_candidates;
use super::{
    adamw_update, batch_info_nce, score_vectors, to_embedding_grads, EmbeddingQueue, InfoNceConfig,
    OptimizerState,
};

/// Query and key encoders, the key queue and the MoCo hyperparameters.
#[derive(Debug, Clone)]
pub struct MoCoState {
    pub query: Parameters,
    pub key: Parameters,
    pub queue: EmbeddingQueue,
    pub momentum: f64,
    pub info_nce: InfoNceConfig,
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("momentum must lie in [0, 1], got {m}")))
    }
}

impl MoCoState {
    /// The key encoder starts as a copy of the query encoder.
    pub fn new(query: Parameters, capacity: usize, momentum: f64, info_nce: InfoNceConfig) -> Result<Self> {
        check_momentum(momentum)?;
        info_nce.validate()?;
        Ok(Self {
            key: query.clone(),
            query,
            queue: EmbeddingQueue::new(capacity)?,
            momentum,
            info_nce,
        })
    }
}

/// θ_k ← m·θ_k + (1 − m)·θ_q for every tensor.
pub fn momentum_update(key: &mut Parameters, query: &Parameters, m: f64) -> Result<()> {
    check_momentum(m)?;
    key.check_congruent(query)?;
    for (k, q) in key.tensors_mut().iter_mut().zip(query.tensors()) {
        for (kv, qv) in k.data.iter_mut().zip(&q.data) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// One MoCo update. Queries go through θ_q with gradients; keys go through
/// θ_k without. Each query's negatives are the queued keys; on the very
/// first batch, while the queue is still empty, the other keys of the batch
/// stand in. After the AdamW step on θ_q and the EMA of θ_k, the batch keys
/// are enqueued. Returns the loss before the update.
pub fn moco_step(
    state: &mut MoCoState,
    optimizer: &mut OptimizerState,
    batch: &[(TokenSequence, TokenSequence)],
) -> Result<f64> {
    let b = batch.len();
    if b == 0 || (state.queue.is_empty() && b < 2) {
        return Err(Error::NoNegatives("MoCo step has no negatives: the queue is empty and the batch has fewer than 2 examples".into()));
    }
    let cfg = state.info_nce;
    let queries: Vec<TokenSequence> = batch.iter().map(|(q, _)| q.clone()).collect();
    let keys: Vec<TokenSequence> = batch.iter().map(|(_, k)| k.clone()).collect();
    let new_keys: Vec<Embedding> = encode_batch(&state.key, &keys)?
        .into_iter()
        .map(|e| if cfg.normalize { e.normalized() } else { e })
        .collect();
    let (loss, grads) = {
        let tape = Tape::forward(&state.query, &queries)?;
        let q_vectors = score_vectors(&tape, cfg.normalize);
        let q_slices: Vec<&[f64]> = q_vectors.iter().map(|e| e.as_slice()).collect();
        let mut k_slices: Vec<&[f64]> = new_keys.iter().map(|e| e.as_slice()).collect();
        let candidates = if state.queue.is_empty() {
            in_batch_candidates(b, b)
        } else {
            k_slices.extend(state.queue.iter().map(|e| e.as_slice()));
            let negatives: Vec<usize> = (b..k_slices.len()).collect();
            (0..b)
                .map(|i| std::iter::once(i).chain(negatives.iter().copied()).collect())
                .collect()
        };
        let bl = batch_info_nce(&q_slices, &k_slices, &candidates, cfg.temperature)?;
        let upstream = to_embedding_grads(&tape, bl.d_queries, cfg.normalize);
        (bl.loss, tape.backward(&upstream)?)
    };
    adamw_update(&mut state.query, &grads, optimizer)?;
    momentum_update(&mut state.key, &state.query, state.momentum)?;
    state.queue.extend(new_keys);
    Ok(loss)
}
