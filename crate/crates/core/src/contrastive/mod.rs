//! Contrastive training: InfoNCE, SimCLR and MoCo steps, AdamW, the
//! pretraining loop and supervised fine-tuning with hard negatives.

mod finetune;
mod loss;
mod moco;
mod optim;
mod pretrain;
mod queue;
mod simclr;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, Tape};
use crate::error::{Error, Result};

pub use finetune::{
    finetune, mine_hard_negatives, sample_finetune_batch, DevSplit, FinetuneBatch, FinetuneConfig,
    FinetuneOutcome, TrainingPair,
};
pub use loss::{batch_info_nce, info_nce, info_nce_scores, normalize_backward, BatchLoss};
pub use moco::{moco_step, momentum_update, MoCoState};
pub use optim::{adamw_update, step_raw, AdamWConfig, OptimizerState};
pub use pretrain::{
    metrics_to_tsv, pretrain, save_checkpoint, write_metrics, Checkpoint, MetricsRow, PretrainConfig,
    PretrainOutcome,
};
pub use queue::EmbeddingQueue;
pub use simclr::simclr_step;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfoNceConfig {
    pub temperature: f64,
    /// L2-normalize embeddings before scoring (off by default).
    pub normalize: bool,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            normalize: false,
        }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Moco,
    Simclr,
}

impl Framework {
    pub const ALL: [Framework; 2] = [Framework::Moco, Framework::Simclr];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Moco => "moco",
            Framework::Simclr => "simclr",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown framework `{s}` (expected moco or simclr)")))
    }
}

/// Scoring vectors for a tape: raw embeddings or their unit-norm versions.
fn score_vectors(tape: &Tape<'_>, normalize: bool) -> Vec<Embedding> {
    tape.embeddings()
        .iter()
        .map(|e| if normalize { e.normalized() } else { e.clone() })
        .collect()
}

/// Maps gradients w.r.t. scoring vectors back to the raw embeddings.
fn to_embedding_grads(tape: &Tape<'_>, grads: Vec<Vec<f64>>, normalize: bool) -> Vec<Vec<f64>> {
    if !normalize {
        return grads;
    }
    tape.embeddings()
        .iter()
        .zip(grads)
        .map(|(e, g)| normalize_backward(&e.0, &g))
        .collect()
}
