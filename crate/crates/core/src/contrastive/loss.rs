use crate::encoder::{dot, Embedding};
use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// InfoNCE over raw scores with the positive at index 0:
/// `loss = logsumexp(s/τ) − s₀/τ`. Returns the loss and ∂loss/∂sᵢ.
pub fn info_nce_scores(scores: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    if scores.len() < 2 {
        return Err(Error::NoNegatives("InfoNCE needs at least one negative score".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("contrastive scores".into()));
    }
    let top = (0..scores.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let max = scores[top];
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    // ln(1 + rest) keeps tiny losses from rounding to zero
    let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, e)| e).sum();
    let total = 1.0 + rest;
    let loss = rest.ln_1p() + (max - scores[0]) / tau;
    let grads = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (e / total - if i == 0 { 1.0 } else { 0.0 }) / tau)
        .collect();
    Ok((loss, grads))
}

/// InfoNCE for one query against its positive key and a set of negatives.
pub fn info_nce(
    q: &Embedding,
    k_plus: &Embedding,
    negatives: &[Embedding],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if negatives.is_empty() {
        return Err(Error::NoNegatives("InfoNCE needs at least one negative score".into()));
    }
    let dim = q.dim();
    if let Some(bad) = std::iter::once(k_plus).chain(negatives).find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let scores: Vec<f64> = std::iter::once(k_plus)
        .chain(negatives)
        .map(|k| dot(&q.0, &k.0))
        .collect();
    info_nce_scores(&scores, tau)
}

/// Mean InfoNCE over a batch where query `i` is scored against the keys
/// listed in `candidates[i]`, positive first.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    /// ∂loss/∂query, one vector per query.
    pub d_queries: Vec<Vec<f64>>,
    /// ∂loss/∂key, one vector per key.
    pub d_keys: Vec<Vec<f64>>,
}

pub fn batch_info_nce(
    queries: &[&[f64]],
    keys: &[&[f64]],
    candidates: &[Vec<usize>],
    tau: f64,
) -> Result<BatchLoss> {
    if queries.is_empty() || queries.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            actual: candidates.len(),
        });
    }
    let dim = queries[0].len();
    if let Some(v) = queries.iter().chain(keys).find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    if candidates.iter().flatten().any(|&j| j >= keys.len()) {
        return Err(Error::InvalidArgument("candidate index out of range".into()));
    }
    let scale = 1.0 / queries.len() as f64;
    let mut loss = 0.0;
    let mut d_queries = vec![vec![0.0; dim]; queries.len()];
    let mut d_keys = vec![vec![0.0; dim]; keys.len()];
    for (i, (q, cand)) in queries.iter().zip(candidates).enumerate() {
        let scores: Vec<f64> = cand.iter().map(|&j| dot(q, keys[j])).collect();
        let (l, g) = info_nce_scores(&scores, tau)?;
        loss += l * scale;
        for (&j, &gs) in cand.iter().zip(&g) {
            let gs = gs * scale;
            for c in 0..dim {
                d_queries[i][c] += gs * keys[j][c];
                d_keys[j][c] += gs * q[c];
            }
        }
    }
    Ok(BatchLoss {
        loss,
        d_queries,
        d_keys,
    })
}

/// Backpropagates `grad` (w.r.t. `x / ‖x‖`) to a gradient w.r.t. `x`.
pub fn normalize_backward(x: &[f64], grad: &[f64]) -> Vec<f64> {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    let proj = dot(x, grad) / (norm * norm);
    x.iter()
        .zip(grad)
        .map(|(xi, gi)| (gi - xi * proj) / norm)
        .collect()
}
