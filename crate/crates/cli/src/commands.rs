use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use densecrab_core::bm25::{build_inverted, query_terms, Bm25Params, InvertedIndex};
use densecrab_core::contrastive::{
    finetune, metrics_to_tsv, mine_hard_negatives, pretrain, save_checkpoint, DevSplit, TrainingPair,
};
use densecrab_core::corpus::{load_corpus, load_qrels, load_queries, write_corpus, write_qrels, write_queries};
use densecrab_core::encoder::encode_batch;
use densecrab_core::eval::{compare_systems, ndcg_at_k, read_report_means, recall_at_k, reports_to_tsv, Run};
use densecrab_core::index::{build_index, run_queries};
use densecrab_core::synthetic::{crop_queries, generate, SyntheticConfig};
use densecrab_core::tokenizer::{build_vocab_from_documents, tokenize};
use densecrab_core::{Corpus, DenseIndex, Parameters, Qrels, Query, SamplingStrategy, Vocabulary};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Fails unless `path` can be created: its directory exists and it is not
/// itself a directory.
pub fn check_output(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        return Err(CliError::Usage(format!("output `{}` is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Usage(format!(
            "output directory `{}` does not exist",
            parent.display()
        )));
    }
    Ok(())
}

pub fn check_input(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
        ))
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes to `out` when given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn load_sources(cfg: &RunConfig) -> CliResult<Vec<Corpus>> {
    if cfg.data.sources.is_empty() {
        return Err(CliError::Config("data.sources lists no training corpus".into()));
    }
    cfg.data
        .sources
        .iter()
        .map(|p| load_corpus(p).map_err(CliError::from))
        .collect()
}

fn load_model(path: &Path, vocab: &Vocabulary) -> CliResult<Parameters> {
    check_input(path)?;
    let params = Parameters::load(path)?;
    if vocab.len() > params.config().vocab_size {
        return Err(CliError::Usage(format!(
            "vocabulary ({} entries) is larger than the model's embedding table ({})",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    Ok(params)
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    check_input(path)?;
    Ok(Vocabulary::load(path)?)
}

fn metrics_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.tsv");
        PathBuf::from(s)
    })
}

pub fn build_vocab_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    check_output(out)?;
    let sources = load_sources(cfg)?;
    let vocab = build_vocab_from_documents(sources.iter().flat_map(|c| c.iter()), cfg.vocab.max_size)?;
    vocab.save(out)?;
    println!("vocabulary: {} entries", vocab.len());
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig, vocab: &Path, out: &Path, metrics: Option<PathBuf>) -> CliResult<()> {
    let metrics = metrics_path(out, metrics);
    check_output(out)?;
    check_output(&metrics)?;
    let vocab = load_vocab(vocab)?;
    let strategy = SamplingStrategy::new(cfg.sampling_mode(), load_sources(cfg)?)?;
    let pc = cfg.pretrain_config();
    let outcome = pretrain(&pc, &strategy, &vocab)?;
    save_checkpoint(out, &outcome.params, &pc, pc.steps)?;
    write_text(&metrics, &metrics_to_tsv(&outcome.metrics))?;
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

/// One pair per (query, relevant document) judgment, in query file order.
fn training_pairs(queries: &[Query], qrels: &Qrels) -> Vec<TrainingPair> {
    queries
        .iter()
        .filter_map(|q| qrels.for_query(&q.id).map(|docs| (q, docs)))
        .flat_map(|(q, docs)| {
            docs.iter().filter(|(_, &g)| g > 0).map(|(d, _)| TrainingPair {
                query: q.text.clone(),
                positive: d.clone(),
            })
        })
        .collect()
}

fn read_hard_negatives(path: &Path, queries: &[Query]) -> CliResult<BTreeMap<String, String>> {
    check_input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let by_id: BTreeMap<&str, &str> = queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let (qid, doc) = line.split_once('\t').ok_or_else(|| {
            CliError::Core(densecrab_core::Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected query-id<TAB>doc-id".into(),
            })
        })?;
        let q = by_id
            .get(qid)
            .ok_or_else(|| CliError::Usage(format!("hard negative for unknown query `{qid}`")))?;
        out.insert(q.to_string(), doc.to_string());
    }
    Ok(out)
}

pub struct FinetuneArgs {
    pub vocab: PathBuf,
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub hard_negatives: Option<PathBuf>,
    pub dev_queries: Option<PathBuf>,
    pub dev_qrels: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
}

pub fn finetune_cmd(cfg: &RunConfig, a: FinetuneArgs) -> CliResult<()> {
    let metrics = metrics_path(&a.out, a.metrics);
    check_output(&a.out)?;
    check_output(&metrics)?;
    if a.dev_queries.is_some() != a.dev_qrels.is_some() {
        return Err(CliError::Usage("--dev-queries and --dev-qrels go together".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model(&a.model, &vocab)?;
    let corpus = load_corpus(&a.corpus)?;
    let queries = load_queries(&a.queries)?;
    let qrels = load_qrels(&a.qrels)?;
    let pairs = training_pairs(&queries, &qrels);
    let hard = a
        .hard_negatives
        .as_deref()
        .map(|p| read_hard_negatives(p, &queries))
        .transpose()?;
    let dev = match (&a.dev_queries, &a.dev_qrels) {
        (Some(q), Some(r)) => Some((load_queries(q)?, load_qrels(r)?)),
        _ => None,
    };
    let fc = cfg.finetune_config();
    let outcome = finetune(
        params,
        &pairs,
        &corpus,
        &vocab,
        hard.as_ref(),
        dev.as_ref().map(|(q, r)| DevSplit { queries: q, qrels: r }),
        &fc,
    )?;
    save_checkpoint(&a.out, &outcome.params, &fc, fc.steps)?;
    write_text(&metrics, &metrics_to_tsv(&outcome.metrics))?;
    for (step, v) in &outcome.dev_history {
        println!("dev step {step} ndcg@10 {v:.6}");
    }
    Ok(())
}

pub struct MineArgs {
    pub vocab: PathBuf,
    pub model: PathBuf,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub top_k: usize,
    pub out: PathBuf,
}

pub fn mine_negatives_cmd(cfg: &RunConfig, a: MineArgs) -> CliResult<()> {
    check_output(&a.out)?;
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model(&a.model, &vocab)?;
    let corpus = load_corpus(&a.corpus)?;
    let queries = load_queries(&a.queries)?;
    let qrels = load_qrels(&a.qrels)?;
    let pairs = training_pairs(&queries, &qrels);
    let mined = mine_hard_negatives(&params, &pairs, &corpus, &vocab, a.top_k, cfg.info_nce.normalize)?;
    let mut text = String::from("query-id\tcorpus-id\n");
    let mut ordered: Vec<&Query> = queries.iter().collect();
    ordered.sort_by(|x, y| x.id.cmp(&y.id));
    for q in ordered {
        if let Some(d) = mined.get(&q.text) {
            writeln!(text, "{}\t{d}", q.id).expect("string write");
        }
    }
    write_text(&a.out, &text)
}

#[derive(Serialize)]
struct EmbeddingRecord<'a> {
    #[serde(rename = "_id")]
    id: &'a str,
    embedding: &'a [f64],
}

pub fn encode_cmd(cfg: &RunConfig, vocab: &Path, model: &Path, input: &Path, out: &Path) -> CliResult<()> {
    check_output(out)?;
    let vocab = load_vocab(vocab)?;
    let params = load_model(model, &vocab)?;
    check_input(input)?;
    let docs = load_corpus(input)?;
    let max_len = params.config().max_len;
    let mut text = String::new();
    for chunk in docs.documents().chunks(cfg.index.batch_size) {
        let batch: Vec<_> = chunk.iter().map(|d| tokenize(&vocab, &d.full_text(), max_len)).collect();
        for (d, e) in chunk.iter().zip(encode_batch(&params, &batch)?) {
            let e = if cfg.info_nce.normalize { e.normalized() } else { e };
            let rec = EmbeddingRecord {
                id: &d.id,
                embedding: e.as_slice(),
            };
            text.push_str(&serde_json::to_string(&rec).expect("embedding serializes"));
            text.push('\n');
        }
    }
    write_text(out, &text)
}

pub fn index_cmd(cfg: &RunConfig, vocab: &Path, model: &Path, corpus: &Path, out: &Path) -> CliResult<()> {
    check_output(out)?;
    let vocab = load_vocab(vocab)?;
    let params = load_model(model, &vocab)?;
    check_input(corpus)?;
    let corpus = load_corpus(corpus)?;
    let index = build_index(&params, &corpus, &vocab, cfg.index.batch_size, cfg.info_nce.normalize)?;
    index.save(out)?;
    println!("indexed {} documents, dim {}", index.len(), index.dim());
    Ok(())
}

pub struct SearchArgs {
    pub vocab: PathBuf,
    pub model: PathBuf,
    pub index: PathBuf,
    pub queries: PathBuf,
    pub k: usize,
    pub tag: String,
    pub out: Option<PathBuf>,
}

pub fn search_cmd(cfg: &RunConfig, a: SearchArgs) -> CliResult<()> {
    if let Some(o) = &a.out {
        check_output(o)?;
    }
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model(&a.model, &vocab)?;
    check_input(&a.index)?;
    let index = DenseIndex::load(&a.index)?;
    if index.dim() != params.config().embed_dim {
        return Err(CliError::Usage(format!(
            "index dimension {} does not match the model's {}",
            index.dim(),
            params.config().embed_dim
        )));
    }
    let queries = load_queries(&a.queries)?;
    let run = run_queries(&index, &params, &vocab, &queries, a.k, cfg.info_nce.normalize)?;
    emit(a.out.as_deref(), &run.to_trec(&a.tag))
}

pub fn bm25_index_cmd(vocab: &Path, corpus: &Path, out: &Path) -> CliResult<()> {
    check_output(out)?;
    let vocab = load_vocab(vocab)?;
    check_input(corpus)?;
    let index = build_inverted(&load_corpus(corpus)?, &vocab)?;
    index.save(out)?;
    println!("indexed {} documents, avgdl {:.3}", index.num_docs(), index.avgdl());
    Ok(())
}

pub struct Bm25SearchArgs {
    pub vocab: PathBuf,
    pub index: PathBuf,
    pub queries: PathBuf,
    pub k: usize,
    pub tag: String,
    pub out: Option<PathBuf>,
}

pub fn bm25_search_cmd(params: &Bm25Params, a: Bm25SearchArgs) -> CliResult<()> {
    if let Some(o) = &a.out {
        check_output(o)?;
    }
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    check_input(&a.index)?;
    let index = InvertedIndex::load(&a.index)?;
    let queries = load_queries(&a.queries)?;
    let mut run = Run::new();
    for q in &queries {
        let terms = query_terms(&vocab, &q.text);
        run.insert(q.id.clone(), index.search(&terms, a.k, params))?;
    }
    emit(a.out.as_deref(), &run.to_trec(&a.tag))
}

pub fn evaluate_cmd(run: &Path, qrels: &Path, ndcg_k: usize, recall_k: usize, out: Option<&Path>) -> CliResult<()> {
    if let Some(o) = out {
        check_output(o)?;
    }
    check_input(run)?;
    check_input(qrels)?;
    let run = Run::read_trec(run)?;
    let qrels = load_qrels(qrels)?;
    let reports = [ndcg_at_k(&run, &qrels, ndcg_k)?, recall_at_k(&run, &qrels, recall_k)?];
    if let Some(o) = out {
        write_text(o, &reports_to_tsv(&reports))?;
    }
    for r in &reports {
        println!("{}\t{:.6}\t({} queries, {} skipped)", r.metric, r.mean, r.num_queries(), r.skipped);
    }
    Ok(())
}

/// `entries` are `SYSTEM,DATASET,REPORT_TSV`; systems keep first-seen order.
pub fn compare_cmd(entries: &[String], metric: &str, out: Option<&Path>) -> CliResult<()> {
    if let Some(o) = out {
        check_output(o)?;
    }
    let mut systems: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for e in entries {
        let mut parts = e.splitn(3, ',');
        let (Some(sys), Some(ds), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CliError::Usage(format!("--report `{e}` is not SYSTEM,DATASET,PATH")));
        };
        check_input(Path::new(path))?;
        let means = read_report_means(path)?;
        let v = *means
            .get(metric)
            .ok_or_else(|| CliError::Usage(format!("report `{path}` has no `{metric}` row")))?;
        let pos = match systems.iter().position(|(s, _)| s == sys) {
            Some(p) => p,
            None => {
                systems.push((sys.to_string(), BTreeMap::new()));
                systems.len() - 1
            }
        };
        if systems[pos].1.insert(ds.to_string(), v).is_some() {
            return Err(CliError::Usage(format!("system `{sys}` has two reports for `{ds}`")));
        }
    }
    let table = compare_systems(metric, &systems)?;
    emit(out, &table.to_tsv())
}

pub struct SynthArgs {
    pub config: SyntheticConfig,
    pub out: PathBuf,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub num_queries: usize,
    pub query_seed: u64,
}

pub fn synth_cmd(a: SynthArgs) -> CliResult<()> {
    check_output(&a.out)?;
    if a.queries.is_some() != a.qrels.is_some() {
        return Err(CliError::Usage("--queries and --qrels go together".into()));
    }
    for p in a.queries.iter().chain(&a.qrels) {
        check_output(p)?;
    }
    let corpus = generate(&a.config)?;
    let held_out = match (&a.queries, &a.qrels) {
        (Some(_), Some(_)) => Some(crop_queries(&corpus, a.num_queries, 0.1, 0.5, a.query_seed)?),
        _ => None,
    };
    write_corpus(&corpus, &a.out)?;
    if let (Some((queries, qrels)), Some(qp), Some(rp)) = (held_out, &a.queries, &a.qrels) {
        write_queries(&queries, qp)?;
        write_qrels(&qrels, rp)?;
    }
    Ok(())
}
