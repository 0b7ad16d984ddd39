//! Positive pairs built from a single document.
//!
//! Two pair constructions are supported: the inverse cloze task (a span as
//! query, the rest of the document as key) and independent cropping (two
//! spans sampled independently). Cropped views can additionally be
//! perturbed by word deletion, replacement or masking.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary, MASK_ID, NUM_RESERVED, UNK_ID};

/// Inclusive 1-based span `[start, end]` inside a sequence of length `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, n: usize) -> Result<Self> {
        if start == 0 || start > end || end > n {
            return Err(Error::InvalidArgument(format!(
                "span [{start}, {end}] is not within [1, {n}]"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    fn slice<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        &ids[self.start - 1..self.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "ict")]
    Ict,
    #[serde(rename = "crop")]
    Crop,
    #[serde(rename = "crop+delete")]
    CropDelete,
    #[serde(rename = "crop+replace")]
    CropReplace,
    #[serde(rename = "crop+mask")]
    CropMask,
}

impl PairKind {
    pub const ALL: [PairKind; 5] = [
        PairKind::Ict,
        PairKind::Crop,
        PairKind::CropDelete,
        PairKind::CropReplace,
        PairKind::CropMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PairKind::Ict => "ict",
            PairKind::Crop => "crop",
            PairKind::CropDelete => "crop+delete",
            PairKind::CropReplace => "crop+replace",
            PairKind::CropMask => "crop+mask",
        }
    }

    pub fn perturbation(self) -> Option<Perturbation> {
        match self {
            PairKind::CropDelete => Some(Perturbation::Delete),
            PairKind::CropReplace => Some(Perturbation::Replace),
            PairKind::CropMask => Some(Perturbation::Mask),
            PairKind::Ict | PairKind::Crop => None,
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PairKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pair kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Delete,
    Replace,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairStrategy {
    pub kind: PairKind,
    /// Smallest span, as a fraction of the document length.
    pub min_ratio: f64,
    /// Largest span, as a fraction of the document length.
    pub max_ratio: f64,
    /// Per-token probability for the crop+X perturbations.
    pub perturb_prob: f64,
    /// Probability that the ICT span is left inside the key.
    pub ict_keep_prob: f64,
}

impl Default for PairStrategy {
    fn default() -> Self {
        Self {
            kind: PairKind::Crop,
            min_ratio: 0.05,
            max_ratio: 0.5,
            perturb_prob: 0.1,
            ict_keep_prob: 0.1,
        }
    }
}

impl PairStrategy {
    pub fn with_kind(kind: PairKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_ratio > 0.0 && self.min_ratio <= self.max_ratio && self.max_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "span ratios must satisfy 0 < min <= max <= 1, got ({}, {})",
                self.min_ratio, self.max_ratio
            )));
        }
        for (name, p) in [("perturb_prob", self.perturb_prob), ("ict_keep_prob", self.ict_keep_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

// Guards ceil/floor against ratios like 0.1 * 30 = 3.0000000000000004.
const RATIO_EPS: f64 = 1e-9;

/// Inclusive bounds on crop length for a sequence of length `n`.
pub fn span_length_bounds(n: usize, min_ratio: f64, max_ratio: f64) -> (usize, usize) {
    let lo = ((min_ratio * n as f64) - RATIO_EPS).ceil().max(1.0) as usize;
    let hi = ((max_ratio * n as f64) + RATIO_EPS).floor() as usize;
    let hi = hi.clamp(lo, n.max(lo));
    (lo, hi)
}

/// Shortest sequence for which the minimum crop length is at least one.
pub fn min_crop_length(min_ratio: f64) -> usize {
    ((1.0 / min_ratio) - RATIO_EPS).ceil() as usize
}

/// Length uniform in `[lo, hi]`, then start uniform among valid positions.
fn sample_span<R: Rng + ?Sized>(n: usize, lo: usize, hi: usize, rng: &mut R) -> Span {
    let len = rng.gen_range(lo..=hi);
    let start = rng.gen_range(1..=n - len + 1);
    Span {
        start,
        end: start + len - 1,
    }
}

/// Samples the two independent crop spans.
pub fn crop_spans<R: Rng + ?Sized>(
    n: usize,
    min_ratio: f64,
    max_ratio: f64,
    rng: &mut R,
) -> Result<(Span, Span)> {
    if n == 0 || n < min_crop_length(min_ratio) {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {n} is too short to crop at min ratio {min_ratio}"
        )));
    }
    let (lo, hi) = span_length_bounds(n, min_ratio, max_ratio);
    Ok((sample_span(n, lo, hi, rng), sample_span(n, lo, hi, rng)))
}

pub fn crop_pair<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    min_ratio: f64,
    max_ratio: f64,
    rng: &mut R,
) -> Result<(TokenSequence, TokenSequence)> {
    let (q, k) = crop_spans(tokens.len(), min_ratio, max_ratio, rng)?;
    Ok((
        TokenSequence(q.slice(tokens.ids()).to_vec()),
        TokenSequence(k.slice(tokens.ids()).to_vec()),
    ))
}

/// ICT with a fixed span: the span is the query, the key is the complement
/// or, when `keep_span` is set, the whole sequence.
pub fn ict_pair_with_span(
    tokens: &TokenSequence,
    span: Span,
    keep_span: bool,
) -> Result<(TokenSequence, TokenSequence)> {
    let ids = tokens.ids();
    let n = ids.len();
    Span::new(span.start, span.end, n)?;
    if !keep_span && span.len() == n {
        return Err(Error::InvalidArgument("ICT span covers the whole sequence".into()));
    }
    let query = span.slice(ids).to_vec();
    let key = if keep_span {
        ids.to_vec()
    } else {
        ids[..span.start - 1]
            .iter()
            .chain(&ids[span.end..])
            .copied()
            .collect()
    };
    Ok((TokenSequence(query), TokenSequence(key)))
}

/// Inverse cloze task pair. Span lengths follow the strategy's ratio bounds,
/// capped at `n - 1` so the complement is never empty.
pub fn ict_pair<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    strategy: &PairStrategy,
    rng: &mut R,
) -> Result<(TokenSequence, TokenSequence)> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ICT needs at least 2 tokens, got {n}"
        )));
    }
    let (lo, hi) = span_length_bounds(n, strategy.min_ratio, strategy.max_ratio);
    let hi = hi.min(n - 1);
    let lo = lo.min(hi);
    let span = sample_span(n, lo, hi, rng);
    let keep = rng.gen_bool(strategy.ict_keep_prob);
    ict_pair_with_span(tokens, span, keep)
}

/// Applies one perturbation independently to every token with probability `p`.
///
/// Deletion never returns an empty sequence: if every token is dropped, one
/// original token (chosen uniformly) survives.
pub fn perturb<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    mode: Perturbation,
    p: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> TokenSequence {
    let ids = tokens.ids();
    if ids.is_empty() {
        return tokens.clone();
    }
    let p = p.clamp(0.0, 1.0);
    let vocab_len = vocab.len() as u32;
    let out: Vec<u32> = match mode {
        Perturbation::Delete => {
            let kept: Vec<u32> = ids.iter().copied().filter(|_| !rng.gen_bool(p)).collect();
            if kept.is_empty() {
                vec![ids[rng.gen_range(0..ids.len())]]
            } else {
                kept
            }
        }
        Perturbation::Replace => ids
            .iter()
            .map(|&id| {
                if !rng.gen_bool(p) {
                    id
                } else if vocab_len > NUM_RESERVED {
                    rng.gen_range(NUM_RESERVED..vocab_len)
                } else {
                    UNK_ID
                }
            })
            .collect(),
        Perturbation::Mask => ids
            .iter()
            .map(|&id| if rng.gen_bool(p) { MASK_ID } else { id })
            .collect(),
    };
    TokenSequence(out)
}

/// Builds a (query, key) pair from an already tokenized document.
pub fn make_pair_from_tokens<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    strategy: &PairStrategy,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(TokenSequence, TokenSequence)> {
    match strategy.kind {
        PairKind::Ict => ict_pair(tokens, strategy, rng),
        kind => {
            let (q, k) = crop_pair(tokens, strategy.min_ratio, strategy.max_ratio, rng)?;
            match kind.perturbation() {
                Some(mode) => Ok((
                    perturb(&q, mode, strategy.perturb_prob, vocab, rng),
                    perturb(&k, mode, strategy.perturb_prob, vocab, rng),
                )),
                None => Ok((q, k)),
            }
        }
    }
}

pub fn make_pair<R: Rng + ?Sized>(
    doc: &Document,
    strategy: &PairStrategy,
    vocab: &Vocabulary,
    max_len: usize,
    rng: &mut R,
) -> Result<(TokenSequence, TokenSequence)> {
    let tokens = tokenize(vocab, &doc.full_text(), max_len);
    make_pair_from_tokens(&tokens, strategy, vocab, rng).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("document `{}`: {msg}", doc.id)),
        other => other,
    })
}
