//! `densecrab`: the dense retrieval pipeline from vocabulary to ablation tables.
//!
//! Every subcommand that trains or encodes reads one TOML config (`--config`).
//! Failures print `error: <category>: <message>` on stderr and exit 1.

mod ablate;
mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densecrab_core::synthetic::SyntheticConfig;

use crate::commands::*;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "densecrab", version, about = "Unsupervised dense retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from the config's training sources.
    BuildVocab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining (MoCo or SimCLR) on the training sources.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.metrics.tsv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Supervised fine-tuning with in-batch and optional hard negatives.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// TSV of query-id, corpus-id as written by `mine-negatives`.
        #[arg(long)]
        hard_negatives: Option<PathBuf>,
        #[arg(long)]
        dev_queries: Option<PathBuf>,
        #[arg(long)]
        dev_qrels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Mine one hard negative per training query with a trained model.
    MineNegatives {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one JSON embedding per document.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Corpus-format JSONL.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a corpus into a dense index.
    Index {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact dense search; writes a TREC run.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value = "densecrab")]
        tag: String,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a BM25 inverted index.
    Bm25Index {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// BM25 search; writes a TREC run.
    Bm25Search {
        /// Optional; supplies `[bm25]` parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        k1: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long, default_value = "bm25")]
        tag: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// nDCG and recall of a run against qrels.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        ndcg_k: usize,
        #[arg(long, default_value_t = 100)]
        recall_k: usize,
        /// Per-query report TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate evaluation reports of several systems across datasets.
    Compare {
        /// SYSTEM,DATASET,REPORT_TSV; repeat once per cell.
        #[arg(long = "report", required = true)]
        reports: Vec<String>,
        #[arg(long, default_value = "ndcg@10")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model per row along an ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// framework, queue-size, augmentation, data-mixing or all.
        #[arg(long, required = true)]
        axis: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a topic-structured synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        label: String,
        #[arg(long, default_value_t = 1000)]
        num_docs: usize,
        #[arg(long, default_value_t = 20)]
        num_topics: usize,
        #[arg(long, default_value_t = 0)]
        topic_offset: usize,
        #[arg(long, default_value_t = 64)]
        doc_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write crop queries to this path (needs --qrels).
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        num_queries: usize,
    },
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    check_input(path).map_err(|_| CliError::Config(format!("config `{}` does not exist", path.display())))?;
    RunConfig::load(path)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::BuildVocab { config, out } => build_vocab_cmd(&load_config(&config)?, &out),
        Command::Pretrain {
            config,
            vocab,
            out,
            metrics,
        } => pretrain_cmd(&load_config(&config)?, &vocab, &out, metrics),
        Command::Finetune {
            config,
            vocab,
            model,
            corpus,
            queries,
            qrels,
            hard_negatives,
            dev_queries,
            dev_qrels,
            out,
            metrics,
        } => finetune_cmd(
            &load_config(&config)?,
            FinetuneArgs {
                vocab,
                model,
                corpus,
                queries,
                qrels,
                hard_negatives,
                dev_queries,
                dev_qrels,
                out,
                metrics,
            },
        ),
        Command::MineNegatives {
            config,
            vocab,
            model,
            corpus,
            queries,
            qrels,
            top_k,
            out,
        } => mine_negatives_cmd(
            &load_config(&config)?,
            MineArgs {
                vocab,
                model,
                corpus,
                queries,
                qrels,
                top_k,
                out,
            },
        ),
        Command::Encode {
            config,
            vocab,
            model,
            input,
            out,
        } => encode_cmd(&load_config(&config)?, &vocab, &model, &input, &out),
        Command::Index {
            config,
            vocab,
            model,
            corpus,
            out,
        } => index_cmd(&load_config(&config)?, &vocab, &model, &corpus, &out),
        Command::Search {
            config,
            vocab,
            model,
            index,
            queries,
            k,
            tag,
            out,
        } => search_cmd(
            &load_config(&config)?,
            SearchArgs {
                vocab,
                model,
                index,
                queries,
                k,
                tag,
                out,
            },
        ),
        Command::Bm25Index { vocab, corpus, out } => bm25_index_cmd(&vocab, &corpus, &out),
        Command::Bm25Search {
            config,
            vocab,
            index,
            queries,
            k,
            k1,
            b,
            tag,
            out,
        } => {
            let mut params = match &config {
                Some(c) => load_config(c)?.bm25,
                None => Default::default(),
            };
            if let Some(k1) = k1 {
                params.k1 = k1;
            }
            if let Some(b) = b {
                params.b = b;
            }
            if !(params.k1 >= 0.0 && params.k1.is_finite() && (0.0..=1.0).contains(&params.b)) {
                return Err(CliError::Usage(format!(
                    "bm25 needs k1 >= 0 and b in [0, 1], got {}, {}",
                    params.k1, params.b
                )));
            }
            bm25_search_cmd(
                &params,
                Bm25SearchArgs {
                    vocab,
                    index,
                    queries,
                    k,
                    tag,
                    out,
                },
            )
        }
        Command::Evaluate {
            run,
            qrels,
            ndcg_k,
            recall_k,
            out,
        } => evaluate_cmd(&run, &qrels, ndcg_k, recall_k, out.as_deref()),
        Command::Compare { reports, metric, out } => compare_cmd(&reports, &metric, out.as_deref()),
        Command::Ablate {
            config,
            vocab,
            axis,
            out_dir,
        } => {
            let mut axes = Vec::new();
            for a in &axis {
                for x in ablate::parse_axes(a).map_err(CliError::Usage)? {
                    if !axes.contains(&x) {
                        axes.push(x);
                    }
                }
            }
            let cfg = load_config(&config)?;
            if !out_dir.is_dir() {
                return Err(CliError::Usage(format!("--out-dir `{}` is not a directory", out_dir.display())));
            }
            let vocab = {
                check_input(&vocab)?;
                densecrab_core::Vocabulary::load(&vocab)?
            };
            let tables = ablate::run_ablation(&cfg, &vocab, &axes)?;
            ablate::write_tables(&out_dir, &tables)?;
            for t in &tables {
                println!("# {}", t.axis.name());
                print!("{}", t.ndcg.to_tsv());
            }
            Ok(())
        }
        Command::Synth {
            out,
            label,
            num_docs,
            num_topics,
            topic_offset,
            doc_len,
            seed,
            queries,
            qrels,
            num_queries,
        } => synth_cmd(SynthArgs {
            config: SyntheticConfig {
                label,
                num_docs,
                num_topics,
                topic_offset,
                doc_len,
                seed,
                ..SyntheticConfig::default()
            },
            out,
            queries,
            qrels,
            num_queries,
            query_seed: seed.wrapping_add(1),
        }),
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("DENSECRAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DENSECRAB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

fn fail(e: &CliError) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error: {}: {}", e.category(), msg);
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.render().to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    if let Err(e) = init_threads().and_then(|_| run(cli.command)) {
        return fail(&e);
    }
    ExitCode::SUCCESS
}
