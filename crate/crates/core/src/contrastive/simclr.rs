use crate::encoder::{Parameters, Tape};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

use super::{adamw_update, batch_info_nce, score_vectors, to_embedding_grads, InfoNceConfig, OptimizerState};

/// In-batch candidates: query `i` scores key `i` first, then every other key.
pub(crate) fn in_batch_candidates(b: usize, keys: usize) -> Vec<Vec<usize>> {
    (0..b)
        .map(|i| std::iter::once(i).chain((0..keys).filter(|&j| j != i)).collect())
        .collect()
}

/// One SimCLR update: both views go through `params`, each query's
/// negatives are the other keys of the batch, and the gradient of the mean
/// loss flows through queries and keys. Returns the loss before the update.
pub fn simclr_step(
    params: &mut Parameters,
    optimizer: &mut OptimizerState,
    batch: &[(TokenSequence, TokenSequence)],
    info_nce: &InfoNceConfig,
) -> Result<f64> {
    info_nce.validate()?;
    let b = batch.len();
    if b < 2 {
        return Err(Error::NoNegatives(format!("SimCLR needs a batch of at least 2, got {b}")));
    }
    let views: Vec<TokenSequence> = batch
        .iter()
        .map(|(q, _)| q.clone())
        .chain(batch.iter().map(|(_, k)| k.clone()))
        .collect();
    let (loss, grads) = {
        let tape = Tape::forward(params, &views)?;
        let vectors = score_vectors(&tape, info_nce.normalize);
        let slices: Vec<&[f64]> = vectors.iter().map(|e| e.as_slice()).collect();
        let (queries, keys) = slices.split_at(b);
        let bl = batch_info_nce(queries, keys, &in_batch_candidates(b, b), info_nce.temperature)?;
        let upstream: Vec<Vec<f64>> = bl.d_queries.into_iter().chain(bl.d_keys).collect();
        let upstream = to_embedding_grads(&tape, upstream, info_nce.normalize);
        (bl.loss, tape.backward(&upstream)?)
    };
    adamw_update(params, &grads, optimizer)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::AdamWConfig;
    use crate::encoder::EncoderConfig;
    use crate::seeded_rng;

    fn tiny() -> Parameters {
        let cfg = EncoderConfig {
            vocab_size: 40,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 16,
            max_len: 16,
        };
        Parameters::init(cfg, &mut seeded_rng(3)).unwrap()
    }

    #[test]
    fn candidates_put_positive_first() {
        let c = in_batch_candidates(3, 3);
        assert_eq!(c, vec![vec![0, 1, 2], vec![1, 0, 2], vec![2, 0, 1]]);
    }

    #[test]
    fn identical_documents_give_log_two() {
        let mut p = tiny();
        let mut opt = OptimizerState::new(AdamWConfig::default(), &p).unwrap();
        let seq = TokenSequence(vec![5, 6, 7, 8]);
        let batch = vec![(seq.clone(), seq.clone()), (seq.clone(), seq)];
        let loss = simclr_step(&mut p, &mut opt, &batch, &InfoNceConfig::default()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn batch_of_one_rejected() {
        let mut p = tiny();
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamWConfig::default(), &p).unwrap();
        let seq = TokenSequence(vec![5, 6]);
        let r = simclr_step(&mut p, &mut opt, &[(seq.clone(), seq)], &InfoNceConfig::default());
        assert!(matches!(r, Err(Error::NoNegatives(_))));
        assert_eq!(p, before);
    }
}
