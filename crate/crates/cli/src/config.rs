//! The experiment config: one TOML file holding every tunable.
//!
//! Only `seed` is mandatory. Relative paths are resolved against the
//! directory containing the config file, and must exist when it is loaded.

use std::path::{Path, PathBuf};

use densecrab_core::bm25::Bm25Params;
use densecrab_core::contrastive::{AdamWConfig, FinetuneConfig, Framework, InfoNceConfig, PretrainConfig};
use densecrab_core::{EncoderConfig, PairStrategy, SamplingMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pair: PairStrategy,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub info_nce: InfoNceConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub index: IndexSection,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub framework: Framework,
    pub steps: usize,
    pub batch_size: usize,
    pub queue_size: usize,
    pub momentum: f64,
    pub log_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            framework: d.framework,
            steps: d.steps,
            batch_size: d.batch_size,
            queue_size: d.queue_size,
            momentum: d.momentum,
            log_every: d.log_every,
            record_wall_time: d.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub sampling: Option<SamplingMode>,
    /// Training corpora (JSONL).
    pub sources: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub max_size: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { max_size: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub hard_negative_prob: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub log_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            hard_negative_prob: d.hard_negative_prob,
            eval_every: d.eval_every,
            patience: d.patience,
            log_every: d.log_every,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// Documents encoded per batch.
    pub batch_size: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self { batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Overrides `training.steps` for every ablation run.
    pub steps: Option<usize>,
    pub queue_sizes: Vec<usize>,
    /// Evaluation datasets; each becomes a column of every table.
    pub datasets: Vec<DatasetSpec>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            steps: None,
            queue_sizes: vec![64, 256, 1024],
            datasets: Vec::new(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_exists(what: &str, p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} `{}` does not exist", p.display())))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.data.sources {
            resolve(base, s);
        }
        for d in &mut cfg.ablate.datasets {
            resolve(base, &mut d.corpus);
            resolve(base, &mut d.queries);
            resolve(base, &mut d.qrels);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.bm25_validate()?;
        if self.vocab.max_size <= 3 {
            return Err(CliError::Config("vocab.max_size must exceed 3".into()));
        }
        if self.index.batch_size == 0 {
            return Err(CliError::Config("index.batch_size must be at least 1".into()));
        }
        if self.data.sampling == Some(SamplingMode::FiftyFifty) && self.data.sources.len() != 2 {
            return Err(CliError::Config(format!(
                "data.sampling = \"fifty-fifty\" needs exactly 2 sources, got {}",
                self.data.sources.len()
            )));
        }
        if self.ablate.steps == Some(0) || self.ablate.queue_sizes.contains(&0) {
            return Err(CliError::Config("ablate steps and queue sizes must be positive".into()));
        }
        for s in &self.data.sources {
            require_exists("data source", s)?;
        }
        for d in &self.ablate.datasets {
            require_exists("dataset corpus", &d.corpus)?;
            require_exists("dataset queries", &d.queries)?;
            require_exists("dataset qrels", &d.qrels)?;
        }
        Ok(())
    }

    fn bm25_validate(&self) -> CliResult<()> {
        let Bm25Params { k1, b } = self.bm25;
        if k1 >= 0.0 && k1.is_finite() && (0.0..=1.0).contains(&b) {
            Ok(())
        } else {
            Err(CliError::Config(format!("bm25 needs k1 >= 0 and b in [0, 1], got {k1}, {b}")))
        }
    }

    /// Sampling mode, defaulting to single for one source and fifty-fifty
    /// for two.
    pub fn sampling_mode(&self) -> SamplingMode {
        self.data.sampling.unwrap_or(match self.data.sources.len() {
            2 => SamplingMode::FiftyFifty,
            n if n > 2 => SamplingMode::Uniform,
            _ => SamplingMode::Single,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let t = &self.training;
        PretrainConfig {
            encoder: self.encoder,
            pair: self.pair,
            framework: t.framework,
            steps: t.steps,
            batch_size: t.batch_size,
            queue_size: t.queue_size,
            momentum: t.momentum,
            info_nce: self.info_nce,
            optimizer: self.optimizer,
            log_every: t.log_every,
            record_wall_time: t.record_wall_time,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            steps: f.steps,
            batch_size: f.batch_size,
            info_nce: self.info_nce,
            optimizer: f.optimizer,
            hard_negative_prob: f.hard_negative_prob,
            eval_every: f.eval_every,
            patience: f.patience,
            log_every: f.log_every,
            seed: self.seed,
        }
    }
}
