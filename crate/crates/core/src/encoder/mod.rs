//! Transformer bi-encoder: one mean-pooled embedding per text, scored by
//! dot product.

mod model;
mod params;

use rayon::prelude::*;

pub use params::{EncoderConfig, Gradients, Parameters, Tensor};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, PAD_ID};
use model::{SeqCache, Weights};

/// Sequences per gradient accumulator. Fixed so summation order, and hence
/// the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; a zero vector is returned unchanged.
    pub fn normalized(&self) -> Embedding {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Embedding(self.0.iter().map(|v| v / n).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Relevance score: the inner product of the two embeddings.
pub fn score(q: &Embedding, d: &Embedding) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: d.dim(),
        });
    }
    Ok(dot(q.as_slice(), d.as_slice()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_input(cfg: &EncoderConfig, tokens: &TokenSequence) -> Result<()> {
    let ids = tokens.ids();
    if ids.iter().all(|&id| id == PAD_ID) {
        return Err(Error::Empty("cannot encode an empty token sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn encode(params: &Parameters, tokens: &TokenSequence) -> Result<Embedding> {
    check_input(params.config(), tokens)?;
    let w = Weights::new(params);
    Ok(Embedding(model::forward(&w, tokens.ids()).0))
}

/// Encodes every sequence independently; results are identical to calling
/// [`encode`] on each one.
pub fn encode_batch(params: &Parameters, batch: &[TokenSequence]) -> Result<Vec<Embedding>> {
    for t in batch {
        check_input(params.config(), t)?;
    }
    let w = Weights::new(params);
    Ok(batch
        .par_iter()
        .map(|t| Embedding(model::forward(&w, t.ids()).0))
        .collect())
}

/// A batch forward pass that keeps what the reverse pass needs.
pub struct Tape<'p> {
    params: &'p Parameters,
    weights: Weights<'p>,
    caches: Vec<SeqCache>,
    embeddings: Vec<Embedding>,
}

impl<'p> Tape<'p> {
    pub fn forward(params: &'p Parameters, batch: &[TokenSequence]) -> Result<Self> {
        for t in batch {
            check_input(params.config(), t)?;
        }
        let weights = Weights::new(params);
        let (embeddings, caches): (Vec<_>, Vec<_>) = batch
            .par_iter()
            .map(|t| {
                let (e, c) = model::forward(&weights, t.ids());
                (Embedding(e), c)
            })
            .unzip();
        Ok(Self {
            params,
            weights,
            caches,
            embeddings,
        })
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Gradient of Σᵢ ⟨upstreamᵢ, embeddingᵢ⟩ with respect to every parameter.
    pub fn backward(&self, upstream: &[Vec<f64>]) -> Result<Gradients> {
        if upstream.len() != self.caches.len() {
            return Err(Error::DimensionMismatch {
                expected: self.caches.len(),
                actual: upstream.len(),
            });
        }
        let dim = self.params.config().embed_dim;
        if let Some(u) = upstream.iter().find(|u| u.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: u.len(),
            });
        }
        let cfg = self.params.config();
        let partials: Vec<Gradients> = self
            .caches
            .par_chunks(GRAD_CHUNK)
            .zip(upstream.par_chunks(GRAD_CHUNK))
            .map(|(caches, ups)| {
                let mut g = Gradients::zeros(cfg);
                {
                    let mut slices = g.data_mut();
                    for (c, u) in caches.iter().zip(ups) {
                        if u.iter().any(|&v| v != 0.0) {
                            model::backward(&self.weights, c, u, &mut slices);
                        }
                    }
                }
                g
            })
            .collect();
        let mut partials = partials.into_iter();
        let mut total = partials.next().unwrap_or_else(|| Gradients::zeros(cfg));
        for p in partials {
            total.add_assign(&p);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("encoder gradients".into()));
        }
        Ok(total)
    }
}

/// Reverse-mode gradient of Σᵢ ⟨upstreamᵢ, encode(batchᵢ)⟩.
pub fn backward(
    params: &Parameters,
    batch: &[TokenSequence],
    upstream: &[Vec<f64>],
) -> Result<Gradients> {
    Tape::forward(params, batch)?.backward(upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 30,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 16,
            max_len: 24,
        }
    }

    fn params(seed: u64) -> Parameters {
        let mut p = Parameters::init(tiny(), &mut seeded_rng(seed)).unwrap();
        // perturb gains and biases so every code path carries signal
        let mut rng = seeded_rng(seed + 1000);
        for t in p.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence(ids.to_vec())
    }

    #[test]
    fn score_examples() {
        let mut e = vec![0.0; 8];
        e[0] = 1.0;
        let e = Embedding(e);
        assert_eq!(score(&e, &e).unwrap(), 1.0);
        let mut f = vec![0.0; 8];
        f[1] = 1.0;
        assert_eq!(score(&e, &Embedding(f)).unwrap(), 0.0);
        assert_eq!(score(&Embedding(vec![1.0, 2.0]), &Embedding(vec![3.0, 4.0])).unwrap(), 11.0);
        assert!(score(&Embedding(vec![1.0]), &Embedding(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn empty_and_oversized_inputs_rejected() {
        let p = params(0);
        assert!(matches!(encode(&p, &seq(&[])), Err(Error::Empty(_))));
        assert!(matches!(encode(&p, &seq(&[PAD_ID, PAD_ID])), Err(Error::Empty(_))));
        assert!(encode(&p, &seq(&[4; 25])).is_err());
        assert!(encode(&p, &seq(&[30])).is_err());
        assert!(encode_batch(&p, &[seq(&[4]), seq(&[])]).is_err());
    }

    #[test]
    fn single_token_embedding_is_its_hidden_state() {
        // with one position attention is the identity mixing, so the
        // embedding can be recomputed by hand layer by layer
        let p = params(1);
        let e = encode(&p, &seq(&[7])).unwrap();
        assert_eq!(e.dim(), 8);
        assert!(e.is_finite());
        let e2 = encode(&p, &seq(&[7, PAD_ID, PAD_ID])).unwrap();
        // PAD keys are masked and excluded from the mean
        for (a, b) in e.0.iter().zip(&e2.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn position_matters() {
        let p = params(2);
        let a = encode(&p, &seq(&[5, 9])).unwrap();
        let b = encode(&p, &seq(&[9, 5])).unwrap();
        assert!(a.0.iter().zip(&b.0).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn deterministic() {
        let p = params(3);
        let t = seq(&[3, 4, 5, 6, 7, 3, 4, 5]);
        let a = encode(&p, &t).unwrap();
        let b = encode(&p, &t).unwrap();
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        let doubled = seq(&[3, 4, 5, 6, 7, 3, 4, 5, 3, 4, 5, 6, 7, 3, 4, 5]);
        assert!(encode(&p, &doubled).unwrap().is_finite());
    }

    #[test]
    fn batch_equals_singletons() {
        let p = params(4);
        let batch = vec![seq(&[4, 5, 6]), seq(&[10]), seq(&[7, 8, 9, 10, 11, 12, 13, 14, 15])];
        let got = encode_batch(&p, &batch).unwrap();
        for (t, e) in batch.iter().zip(&got) {
            let single = encode(&p, t).unwrap();
            for (a, b) in single.0.iter().zip(&e.0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(encode_batch(&p, &batch[..1]).unwrap()[0], encode(&p, &batch[0]).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = params(5);
        let batch = vec![seq(&[4, 5, 6]), seq(&[8, 9])];
        let g = backward(&p, &batch, &[vec![0.0; 8], vec![0.0; 8]]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = params(6);
        let batch = vec![seq(&[4, 5, 6, 11]), seq(&[8, 9, 12])];
        let mut rng = seeded_rng(66);
        let up: Vec<Vec<f64>> = (0..2).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let up2: Vec<Vec<f64>> = up.iter().map(|u| u.iter().map(|v| 2.0 * v).collect()).collect();
        let g1 = backward(&p, &batch, &up).unwrap();
        let g2 = backward(&p, &batch, &up2).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn backward_shape_mismatch() {
        let p = params(7);
        assert!(backward(&p, &[seq(&[4])], &[]).is_err());
        assert!(backward(&p, &[seq(&[4])], &[vec![1.0; 3]]).is_err());
    }

    /// Central differences on f(θ) = Σᵢ ⟨uᵢ, encode(xᵢ; θ)⟩.
    #[test]
    fn gradients_match_finite_differences() {
        for seed in [11u64, 12, 13] {
            let p = params(seed);
            let batch = vec![seq(&[4, 5, 6, 7, 8]), seq(&[9, PAD_ID, 10]), seq(&[12])];
            let mut rng = seeded_rng(seed * 7);
            let up: Vec<Vec<f64>> =
                (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let objective = |p: &Parameters| -> f64 {
                encode_batch(p, &batch)
                    .unwrap()
                    .iter()
                    .zip(&up)
                    .map(|(e, u)| dot(&e.0, u))
                    .sum()
            };
            let g = backward(&p, &batch, &up).unwrap();
            let n_tensors = p.tensors().len();
            for _ in 0..100 {
                let ti = rng.gen_range(0..n_tensors);
                let ei = rng.gen_range(0..p.tensors()[ti].len());
                let h = 1e-4;
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.tensors_mut()[ti].data[ei] += h;
                minus.tensors_mut()[ti].data[ei] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.tensors()[ti].data[ei];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-3, "{}[{ei}]: analytic {an} numeric {fd}", p.tensors()[ti].name);
            }
        }
    }
}
