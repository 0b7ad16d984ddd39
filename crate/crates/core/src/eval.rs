//! Ranking evaluation: TREC run files, nDCG@k, Recall@k and comparison
//! tables across systems and datasets.
//!
//! Gains follow the trec_eval / BEIR convention `2^grade − 1`; a document is
//! relevant for recall when its grade is at least 1. Queries without any
//! positive judgment are skipped and counted.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::Qrels;
use crate::error::{Error, Result};

/// Ranked results per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    results: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a ranked list. Scores must be non-increasing and doc ids unique.
    pub fn insert(&mut self, query_id: impl Into<String>, ranked: Vec<(String, f64)>) -> Result<()> {
        let query_id = query_id.into();
        let mut seen = HashSet::with_capacity(ranked.len());
        for (doc, _) in &ranked {
            if !seen.insert(doc.as_str()) {
                return Err(Error::Eval(format!("query `{query_id}` ranks `{doc}` twice")));
            }
        }
        if ranked.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::Eval(format!("query `{query_id}` is not sorted by score")));
        }
        self.results.insert(query_id, ranked);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.results.get(query_id).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.results.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    /// TREC format: `qid Q0 docid rank score tag`, ranks starting at 1.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.results {
            for (rank, (doc, score)) in ranked.iter().enumerate() {
                out.push_str(&format!("{q} Q0 {doc} {} {score:.6} {tag}\n", rank + 1));
            }
        }
        out
    }

    pub fn write_trec(&self, path: impl AsRef<Path>, tag: &str) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(self.to_trec(tag).as_bytes()).map_err(io)?;
        out.flush().map_err(io)
    }

    pub fn read_trec(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(parse_err("expected `qid Q0 docid rank score tag`"));
            }
            let rank: usize = f[3].parse().map_err(|_| parse_err("rank is not an integer"))?;
            let score: f64 = f[4].parse().map_err(|_| parse_err("score is not a number"))?;
            rows.entry(f[0].to_string())
                .or_default()
                .push((rank, f[2].to_string(), score));
        }
        let mut run = Run::new();
        for (q, mut list) in rows {
            list.sort_by_key(|r| r.0);
            run.insert(q, list.into_iter().map(|(_, d, s)| (d, s)).collect())?;
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// e.g. `ndcg@10`.
    pub metric: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Run queries skipped for lacking a positive judgment.
    pub skipped: usize,
}

impl MetricReport {
    pub fn num_queries(&self) -> usize {
        self.per_query.len()
    }
}

fn evaluate<F>(run: &Run, qrels: &Qrels, name: &str, k: usize, per_query: F) -> Result<MetricReport>
where
    F: Fn(&[(String, f64)], &BTreeMap<String, u32>) -> f64,
{
    if k == 0 {
        return Err(Error::Eval("cutoff k must be at least 1".into()));
    }
    let mut values = BTreeMap::new();
    let mut skipped = 0;
    for (q, ranked) in &run.results {
        match qrels.for_query(q) {
            Some(judged) if judged.values().any(|&g| g > 0) => {
                values.insert(q.clone(), per_query(ranked, judged));
            }
            _ => {
                log::warn!("query `{q}` has no positive judgment; skipped");
                skipped += 1;
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Eval(
            "no run query has a positive relevance judgment".into(),
        ));
    }
    let mean = values.values().sum::<f64>() / values.len() as f64;
    Ok(MetricReport {
        metric: format!("{name}@{k}"),
        k,
        per_query: values,
        mean,
        skipped,
    })
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// nDCG@k with gain `2^grade − 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, "ndcg", k, |ranked, judged| {
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, _))| {
                gain(judged.get(doc).copied().unwrap_or(0)) / ((i + 2) as f64).log2()
            })
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
            .sum();
        dcg / idcg
    })
}

/// Fraction of relevant (grade ≥ 1) documents found in the top k.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, "recall", k, |ranked, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let found = ranked
            .iter()
            .take(k)
            .filter(|(doc, _)| judged.get(doc).is_some_and(|&g| g > 0))
            .count();
        found as f64 / relevant as f64
    })
}

/// Writes reports as TSV: one row per (metric, query) and a final `all`
/// row per metric holding the mean.
pub fn reports_to_tsv(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric\tquery\tvalue\n");
    for r in reports {
        for (q, v) in &r.per_query {
            out.push_str(&format!("{}\t{q}\t{v:.6}\n", r.metric));
        }
        out.push_str(&format!("{}\tall\t{:.6}\n", r.metric, r.mean));
    }
    out
}

/// Reads back the per-metric means (`all` rows) of a report TSV.
pub fn read_report_means(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut means = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected metric, query, value".into(),
            });
        }
        if f[1] == "all" {
            let v = f[2].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("`{}` is not a number", f[2]),
            })?;
            means.insert(f[0].to_string(), v);
        }
    }
    Ok(means)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub system: String,
    /// One value per dataset, in table column order.
    pub values: Vec<f64>,
    pub average: f64,
    pub best_on: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub metric: String,
    pub datasets: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("system\t{}\tavg\tbest_on\n", self.datasets.join("\t"));
        for r in &self.rows {
            out.push_str(&r.system);
            for v in &r.values {
                out.push_str(&format!("\t{v:.4}"));
            }
            out.push_str(&format!("\t{:.4}\t{}\n", r.average, r.best_on));
        }
        out
    }
}

/// Builds a system × dataset table of mean metric values, with row
/// averages and the number of datasets on which each system is best (every
/// tied system is credited). Rows keep the order given.
pub fn compare_systems(
    metric: &str,
    systems: &[(String, BTreeMap<String, f64>)],
) -> Result<ComparisonTable> {
    let first = systems
        .first()
        .ok_or_else(|| Error::Eval("no systems to compare".into()))?;
    let datasets: Vec<String> = first.1.keys().cloned().collect();
    if datasets.is_empty() {
        return Err(Error::Eval("no datasets to compare".into()));
    }
    for (name, per_dataset) in systems {
        if per_dataset.keys().ne(first.1.keys()) {
            return Err(Error::Eval(format!(
                "system `{name}` was evaluated on a different dataset set than `{}`",
                first.0
            )));
        }
    }
    let mut rows: Vec<ComparisonRow> = systems
        .iter()
        .map(|(name, per_dataset)| {
            let values: Vec<f64> = datasets.iter().map(|d| per_dataset[d]).collect();
            ComparisonRow {
                system: name.clone(),
                average: values.iter().sum::<f64>() / values.len() as f64,
                values,
                best_on: 0,
            }
        })
        .collect();
    for j in 0..datasets.len() {
        let best = rows
            .iter()
            .map(|r| r.values[j])
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut().filter(|r| r.values[j] == best) {
            r.best_on += 1;
        }
    }
    Ok(ComparisonTable {
        metric: metric.to_string(),
        datasets,
        rows,
    })
}

/// Convenience wrapper taking full reports instead of means.
pub fn compare_reports(
    metric: &str,
    systems: &[(String, BTreeMap<String, MetricReport>)],
) -> Result<ComparisonTable> {
    let means: Vec<(String, BTreeMap<String, f64>)> = systems
        .iter()
        .map(|(s, per)| (s.clone(), per.iter().map(|(d, r)| (d.clone(), r.mean)).collect()))
        .collect();
    compare_systems(metric, &means)
}
