//! Ablation harness: one pretraining run per row, every row evaluated on
//! every configured dataset, one comparison table per axis.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use densecrab_core::contrastive::{pretrain, PretrainConfig};
use densecrab_core::corpus::{load_corpus, load_qrels, load_queries};
use densecrab_core::eval::{compare_systems, ndcg_at_k, recall_at_k, ComparisonTable};
use densecrab_core::index::{build_index, run_queries};
use densecrab_core::{Corpus, Framework, PairKind, Qrels, Query, SamplingMode, SamplingStrategy, Vocabulary};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Framework,
    QueueSize,
    Augmentation,
    DataMixing,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Framework, Axis::QueueSize, Axis::Augmentation, Axis::DataMixing];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Framework => "framework",
            Axis::QueueSize => "queue-size",
            Axis::Augmentation => "augmentation",
            Axis::DataMixing => "data-mixing",
        }
    }
}

/// Parses one axis name or `all`.
pub fn parse_axes(s: &str) -> Result<Vec<Axis>, String> {
    if s == "all" {
        return Ok(Axis::ALL.to_vec());
    }
    Axis::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .map(|a| vec![a])
        .ok_or_else(|| format!("unknown axis `{s}`; expected framework, queue-size, augmentation, data-mixing or all"))
}

const AUGMENTATIONS: [&str; 4] = ["ict", "crop", "crop+delete", "crop+replace"];

struct Dataset {
    name: String,
    corpus: Corpus,
    queries: Vec<Query>,
    qrels: Qrels,
}

struct Row {
    system: String,
    config: PretrainConfig,
    sampling: SamplingStrategy,
}

/// Both tables for one axis.
pub struct AxisTables {
    pub axis: Axis,
    pub ndcg: ComparisonTable,
    pub recall: ComparisonTable,
}

fn rows_for(axis: Axis, cfg: &RunConfig, sources: &[Corpus]) -> CliResult<Vec<Row>> {
    let mut base = cfg.pretrain_config();
    if let Some(steps) = cfg.ablate.steps {
        base.steps = steps;
    }
    let default_sampling = || SamplingStrategy::new(cfg.sampling_mode(), sources.to_vec());
    let mut rows = Vec::new();
    match axis {
        Axis::Framework => {
            // MoCo restricted to as many negatives as SimCLR sees in a batch
            let moco = PretrainConfig {
                framework: Framework::Moco,
                queue_size: base.batch_size,
                ..base.clone()
            };
            let simclr = PretrainConfig {
                framework: Framework::Simclr,
                ..base.clone()
            };
            for (name, c) in [("moco", moco), ("simclr", simclr)] {
                rows.push(Row {
                    system: name.into(),
                    config: c,
                    sampling: default_sampling()?,
                });
            }
        }
        Axis::QueueSize => {
            for &k in &cfg.ablate.queue_sizes {
                rows.push(Row {
                    system: format!("queue={k}"),
                    config: PretrainConfig {
                        framework: Framework::Moco,
                        queue_size: k,
                        ..base.clone()
                    },
                    sampling: default_sampling()?,
                });
            }
        }
        Axis::Augmentation => {
            for name in AUGMENTATIONS {
                let mut c = base.clone();
                c.pair.kind = PairKind::from_str(name)?;
                rows.push(Row {
                    system: name.into(),
                    config: c,
                    sampling: default_sampling()?,
                });
            }
        }
        Axis::DataMixing => {
            if sources.len() != 2 {
                return Err(CliError::Config(format!(
                    "the data-mixing axis needs exactly 2 data sources, got {}",
                    sources.len()
                )));
            }
            for s in sources {
                rows.push(Row {
                    system: s.source_label.clone(),
                    config: base.clone(),
                    sampling: SamplingStrategy::single(s.clone())?,
                });
            }
            rows.push(Row {
                system: "uniform".into(),
                config: base.clone(),
                sampling: SamplingStrategy::new(SamplingMode::Uniform, sources.to_vec())?,
            });
            rows.push(Row {
                system: "50/50".into(),
                config: base,
                sampling: SamplingStrategy::new(SamplingMode::FiftyFifty, sources.to_vec())?,
            });
        }
    }
    Ok(rows)
}

fn evaluate_row(row: &Row, cfg: &RunConfig, vocab: &Vocabulary, datasets: &[Dataset]) -> CliResult<[BTreeMap<String, f64>; 2]> {
    log::info!("ablate: training `{}` for {} steps", row.system, row.config.steps);
    let outcome = pretrain(&row.config, &row.sampling, vocab)?;
    let normalize = cfg.info_nce.normalize;
    let mut ndcg = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for d in datasets {
        let index = build_index(&outcome.params, &d.corpus, vocab, cfg.index.batch_size, normalize)?;
        let run = run_queries(&index, &outcome.params, vocab, &d.queries, 100, normalize)?;
        ndcg.insert(d.name.clone(), ndcg_at_k(&run, &d.qrels, 10)?.mean);
        recall.insert(d.name.clone(), recall_at_k(&run, &d.qrels, 100)?.mean);
    }
    Ok([ndcg, recall])
}

/// Trains and evaluates every row of every requested axis.
pub fn run_ablation(cfg: &RunConfig, vocab: &Vocabulary, axes: &[Axis]) -> CliResult<Vec<AxisTables>> {
    if cfg.ablate.datasets.is_empty() {
        return Err(CliError::Config("ablate.datasets lists no evaluation dataset".into()));
    }
    let sources = crate::commands::load_sources(cfg)?;
    let datasets = cfg
        .ablate
        .datasets
        .iter()
        .map(|d| {
            Ok(Dataset {
                name: d.name.clone(),
                corpus: load_corpus(&d.corpus)?,
                queries: load_queries(&d.queries)?,
                qrels: load_qrels(&d.qrels)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    // build every row first so a bad axis fails before any training
    let plans = axes
        .iter()
        .map(|&a| Ok((a, rows_for(a, cfg, &sources)?)))
        .collect::<CliResult<Vec<_>>>()?;
    for (_, rows) in &plans {
        for r in rows {
            r.config.validate()?;
        }
    }
    let mut out = Vec::new();
    for (axis, rows) in plans {
        let mut ndcg = Vec::new();
        let mut recall = Vec::new();
        for row in &rows {
            let [n, r] = evaluate_row(row, cfg, vocab, &datasets)?;
            ndcg.push((row.system.clone(), n));
            recall.push((row.system.clone(), r));
        }
        out.push(AxisTables {
            axis,
            ndcg: compare_systems("ndcg@10", &ndcg)?,
            recall: compare_systems("recall@100", &recall)?,
        });
    }
    Ok(out)
}

/// Writes `<axis>.tsv` (nDCG@10) and `<axis>.recall.tsv` into `dir`.
pub fn write_tables(dir: &Path, tables: &[AxisTables]) -> CliResult<()> {
    for t in tables {
        crate::commands::write_text(&dir.join(format!("{}.tsv", t.axis.name())), &t.ndcg.to_tsv())?;
        crate::commands::write_text(&dir.join(format!("{}.recall.tsv", t.axis.name())), &t.recall.to_tsv())?;
    }
    Ok(())
}
