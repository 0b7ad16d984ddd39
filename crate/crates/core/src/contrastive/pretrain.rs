use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, PairStrategy};
use crate::corpus::{BatchSampler, SamplingStrategy};
use crate::encoder::{EncoderConfig, Parameters};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tokenizer::{TokenSequence, Vocabulary};

use super::{moco_step, simclr_step, AdamWConfig, Framework, InfoNceConfig, MoCoState, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub pair: PairStrategy,
    pub framework: Framework,
    pub steps: usize,
    pub batch_size: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub info_nce: InfoNceConfig,
    pub optimizer: AdamWConfig,
    /// A metrics row is emitted every `log_every` steps and after the last.
    pub log_every: usize,
    /// Off by default so the metrics file is reproducible; when off the
    /// wall_ms column is written as 0.
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pair: PairStrategy::default(),
            framework: Framework::Moco,
            steps: 1000,
            batch_size: 32,
            queue_size: 4096,
            momentum: 0.9995,
            info_nce: InfoNceConfig::default(),
            optimizer: AdamWConfig::default(),
            log_every: 10,
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pair.validate()?;
        self.info_nce.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2 to provide negatives, got {}",
                self.batch_size
            )));
        }
        if self.queue_size == 0 {
            return Err(Error::InvalidArgument("queue size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean loss over the steps since the previous row.
    pub loss: f64,
    pub queue_fill: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// The query encoder.
    pub params: Parameters,
    pub metrics: Vec<MetricsRow>,
}

enum Trainer {
    Moco(Box<MoCoState>),
    Simclr(Parameters),
}

impl Trainer {
    fn params(&self) -> &Parameters {
        match self {
            Trainer::Moco(s) => &s.query,
            Trainer::Simclr(p) => p,
        }
    }
}

/// Runs `cfg.steps` updates of the selected framework on batches drawn from
/// `sampling`, turning each document into a positive pair with `cfg.pair`.
pub fn pretrain(cfg: &PretrainConfig, sampling: &SamplingStrategy, vocab: &Vocabulary) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if vocab.len() > cfg.encoder.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} entries but the encoder embeds only {}",
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let init = Parameters::init(cfg.encoder, &mut rng)?;
    let mut optimizer = OptimizerState::new(cfg.optimizer, &init)?;
    let mut trainer = match cfg.framework {
        Framework::Moco => Trainer::Moco(Box::new(MoCoState::new(init, cfg.queue_size, cfg.momentum, cfg.info_nce)?)),
        Framework::Simclr => Trainer::Simclr(init),
    };
    let mut sampler = BatchSampler::new(sampling);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let (mut window_loss, mut window_len) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let docs = sampler.sample_batch(cfg.batch_size, &mut rng)?;
        let batch = docs
            .iter()
            .map(|d| make_pair(d, &cfg.pair, vocab, cfg.encoder.max_len, &mut rng))
            .collect::<Result<Vec<(TokenSequence, TokenSequence)>>>()?;
        let loss = match &mut trainer {
            Trainer::Moco(state) => moco_step(state, &mut optimizer, &batch)?,
            Trainer::Simclr(params) => simclr_step(params, &mut optimizer, &batch, &cfg.info_nce)?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        window_loss += loss;
        window_len += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let row = MetricsRow {
                step,
                loss: window_loss / window_len as f64,
                queue_fill: match &trainer {
                    Trainer::Moco(s) => s.queue.len(),
                    Trainer::Simclr(_) => 0,
                },
                wall_ms: if cfg.record_wall_time {
                    start.elapsed().as_millis()
                } else {
                    0
                },
            };
            log::info!("step {} loss {:.4} queue {}", row.step, row.loss, row.queue_fill);
            metrics.push(row);
            window_loss = 0.0;
            window_len = 0;
        }
    }
    Ok(PretrainOutcome {
        params: trainer.params().clone(),
        metrics,
    })
}

pub fn metrics_to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step\tloss\tqueue_fill\twall_ms\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{}\t{}\n", r.step, r.loss, r.queue_fill, r.wall_ms));
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_to_tsv(rows)).map_err(|e| Error::io(path, e))
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub config: C,
    pub steps: usize,
}

/// Writes the parameters to `path` and the training config plus step count
/// to `path` with `.json` appended. Returns the sidecar path.
pub fn save_checkpoint<C: Serialize>(
    path: impl AsRef<Path>,
    params: &Parameters,
    config: &C,
    steps: usize,
) -> Result<PathBuf> {
    let path = path.as_ref();
    params.save(path)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let sidecar = PathBuf::from(sidecar);
    let json = serde_json::to_string_pretty(&Checkpoint { config, steps })
        .map_err(|e| Error::Format(format!("checkpoint sidecar: {e}")))?;
    std::fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PairKind;
    use crate::synthetic::{generate, SyntheticConfig};
    use crate::tokenizer::build_vocab;

    fn setup(num_docs: usize) -> (SamplingStrategy, Vocabulary, PretrainConfig) {
        let corpus = generate(&SyntheticConfig {
            num_docs,
            num_topics: 5,
            words_per_topic: 20,
            shared_words: 30,
            doc_len: 24,
            seed: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus, 1000).unwrap();
        let cfg = PretrainConfig {
            encoder: EncoderConfig {
                vocab_size: vocab.len(),
                embed_dim: 16,
                num_layers: 1,
                num_heads: 2,
                feedforward_dim: 32,
                max_len: 32,
            },
            pair: PairStrategy::with_kind(PairKind::Crop),
            steps: 50,
            batch_size: 8,
            queue_size: 64,
            momentum: 0.99,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                ..AdamWConfig::default()
            },
            log_every: 10,
            seed: 7,
            ..PretrainConfig::default()
        };
        (SamplingStrategy::single(corpus).unwrap(), vocab, cfg)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (s, v, cfg) = setup(20);
        let cfg = PretrainConfig { steps: 0, ..cfg };
        let out = pretrain(&cfg, &s, &v).unwrap();
        let init = Parameters::init(cfg.encoder, &mut seeded_rng(cfg.seed)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn simclr_loss_decreases() {
        let (s, v, cfg) = setup(100);
        let cfg = PretrainConfig {
            framework: Framework::Simclr,
            ..cfg
        };
        let out = pretrain(&cfg, &s, &v).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn moco_loss_decreases_and_queue_fills() {
        let (s, v, cfg) = setup(100);
        let cfg = PretrainConfig {
            steps: 200,
            log_every: 20,
            ..cfg
        };
        let out = pretrain(&cfg, &s, &v).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.metrics.last().unwrap().queue_fill, 64);
        assert_eq!(out.metrics.len(), 10);
    }

    #[test]
    fn metrics_are_reproducible() {
        let (s, v, cfg) = setup(30);
        let cfg = PretrainConfig { steps: 12, log_every: 5, ..cfg };
        let a = metrics_to_tsv(&pretrain(&cfg, &s, &v).unwrap().metrics);
        let b = metrics_to_tsv(&pretrain(&cfg, &s, &v).unwrap().metrics);
        assert_eq!(a, b);
        let steps: Vec<&str> = a.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(steps, ["5", "10", "12"]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (s, v, cfg) = setup(10);
        for bad in [
            PretrainConfig { batch_size: 1, ..cfg.clone() },
            PretrainConfig { momentum: 2.0, ..cfg.clone() },
            PretrainConfig { log_every: 0, ..cfg.clone() },
            PretrainConfig {
                encoder: EncoderConfig { vocab_size: 5, ..cfg.encoder },
                ..cfg.clone()
            },
        ] {
            assert!(pretrain(&bad, &s, &v).is_err());
        }
    }

    #[test]
    fn checkpoint_sidecar() {
        let (_, _, cfg) = setup(10);
        let params = Parameters::init(cfg.encoder, &mut seeded_rng(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let sidecar = save_checkpoint(&path, &params, &cfg, 12).unwrap();
        assert_eq!(sidecar, dir.path().join("model.bin.json"));
        let back: Checkpoint<PretrainConfig> =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(back, Checkpoint { config: cfg, steps: 12 });
        assert_eq!(Parameters::load(&path).unwrap(), params);
    }
}
