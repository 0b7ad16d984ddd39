mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{bundled, densecrab, read, write_config};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// build-vocab, pretrain and index into `dir`; returns the config path.
fn train(dir: &Path, steps: i64) -> std::path::PathBuf {
    let cfg = write_config(dir, &[("training.steps", toml::Value::Integer(steps))]);
    let (v, m, i) = (dir.join("vocab.txt"), dir.join("model.bin"), dir.join("index.bin"));
    densecrab(&["build-vocab", "--config", s(&cfg), "--out", s(&v)]).assert_ok();
    densecrab(&["pretrain", "--config", s(&cfg), "--vocab", s(&v), "--out", s(&m)]).assert_ok();
    densecrab(&[
        "index", "--config", s(&cfg), "--vocab", s(&v), "--model", s(&m), "--corpus",
        s(&bundled("wiki.jsonl")), "--out", s(&i),
    ])
    .assert_ok();
    cfg
}

#[test]
fn end_to_end_on_bundled_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = train(d, 500);
    let run = d.join("run.trec");
    densecrab(&[
        "search", "--config", s(&cfg), "--vocab", s(&d.join("vocab.txt")), "--model", s(&d.join("model.bin")),
        "--index", s(&d.join("index.bin")), "--queries", s(&bundled("wiki-queries.jsonl")), "--out", s(&run),
    ])
    .assert_ok();
    let report = d.join("report.tsv");
    let out = densecrab(&[
        "evaluate", "--run", s(&run), "--qrels", s(&bundled("wiki-qrels.tsv")), "--out", s(&report),
    ]);
    out.assert_ok();
    assert!(out.stdout.contains("ndcg@10"));

    let text = read(&report);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric\tquery\tvalue"));
    let mut means = BTreeMap::new();
    for l in lines {
        let f: Vec<&str> = l.split('\t').collect();
        let v: f64 = f[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{l}");
        if f[1] == "all" {
            means.insert(f[0].to_string(), v);
        }
    }
    assert_eq!(means.keys().collect::<Vec<_>>(), ["ndcg@10", "recall@100"]);

    let metrics = read(&d.join("model.bin.metrics.tsv"));
    assert!(metrics.starts_with("step\tloss\tqueue_fill\twall_ms\n"));
    assert_eq!(metrics.lines().count(), 1 + 500 / 10);
    assert!(d.join("model.bin.json").exists());
}

#[test]
fn search_prints_k_trec_lines_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = train(d, 20);
    let out = densecrab(&[
        "search", "--config", s(&cfg), "--vocab", s(&d.join("vocab.txt")), "--model", s(&d.join("model.bin")),
        "--index", s(&d.join("index.bin")), "--queries", s(&bundled("wiki-queries.jsonl")), "--k", "10",
    ]);
    out.assert_ok();
    let mut per_query: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for line in out.stdout.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 6, "{line}");
        assert_eq!(f[1], "Q0");
        assert_eq!(f[5], "densecrab");
        per_query.entry(f[0]).or_default().push(f[3].parse().unwrap());
    }
    assert_eq!(per_query.len(), 50);
    for ranks in per_query.values() {
        assert_eq!(ranks, &(1..=10).collect::<Vec<_>>());
    }
}

#[test]
fn bm25_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &[]);
    let v = d.join("vocab.txt");
    densecrab(&["build-vocab", "--config", s(&cfg), "--out", s(&v)]).assert_ok();
    for (name, k1) in [("a", "1.2"), ("b", "0.5")] {
        let idx = d.join("bm25.json");
        densecrab(&["bm25-index", "--vocab", s(&v), "--corpus", s(&bundled("ccnet.jsonl")), "--out", s(&idx)])
            .assert_ok();
        let run = d.join(format!("{name}.trec"));
        densecrab(&[
            "bm25-search", "--vocab", s(&v), "--index", s(&idx), "--queries", s(&bundled("ccnet-queries.jsonl")),
            "--k1", k1, "--out", s(&run),
        ])
        .assert_ok();
        densecrab(&[
            "evaluate", "--run", s(&run), "--qrels", s(&bundled("ccnet-qrels.tsv")), "--out",
            s(&d.join(format!("{name}.tsv"))),
        ])
        .assert_ok();
    }
    let out = densecrab(&[
        "compare", "--report", &format!("k1=1.2,ccnet,{}", s(&d.join("a.tsv"))), "--report",
        &format!("k1=0.5,ccnet,{}", s(&d.join("b.tsv"))), "--metric", "recall@100",
    ]);
    out.assert_ok();
    let lines: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(lines[0], "system\tccnet\tavg\tbest_on");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("k1=1.2\t") && lines[2].starts_with("k1=0.5\t"));
}

#[test]
fn finetune_with_mined_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = train(d, 30);
    let (v, m) = (d.join("vocab.txt"), d.join("model.bin"));
    let (corpus, queries, qrels) = (bundled("wiki.jsonl"), bundled("wiki-queries.jsonl"), bundled("wiki-qrels.tsv"));
    let common = [
        "--config", s(&cfg), "--vocab", s(&v), "--model", s(&m), "--corpus", s(&corpus),
        "--queries", s(&queries), "--qrels", s(&qrels),
    ];
    let hn = d.join("hard.tsv");
    let mut args = vec!["mine-negatives"];
    args.extend(common);
    args.extend(["--top-k", "20", "--out", s(&hn)]);
    densecrab(&args).assert_ok();
    let mined = read(&hn);
    assert_eq!(mined.lines().next(), Some("query-id\tcorpus-id"));
    assert_eq!(mined.lines().count(), 51);

    let ft = d.join("ft.bin");
    let mut args = vec!["finetune"];
    args.extend(common);
    args.extend([
        "--hard-negatives", s(&hn), "--dev-queries", s(&queries), "--dev-qrels", s(&qrels), "--out", s(&ft),
    ]);
    let out = densecrab(&args);
    out.assert_ok();
    assert!(out.stdout.starts_with("dev step 0 ndcg@10 "));
    assert!(ft.exists() && d.join("ft.bin.json").exists() && d.join("ft.bin.metrics.tsv").exists());

    let emb = d.join("emb.jsonl");
    densecrab(&[
        "encode", "--config", s(&cfg), "--vocab", s(&v), "--model", s(&ft), "--input",
        s(&bundled("wiki-queries.jsonl")), "--out", s(&emb),
    ])
    .assert_ok();
    let first: serde_json::Value = serde_json::from_str(read(&emb).lines().next().unwrap()).unwrap();
    assert_eq!(first["_id"], "q0");
    assert_eq!(first["embedding"].as_array().unwrap().len(), 32);
}

#[test]
fn errors_are_one_line_with_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: Vec<(Vec<String>, &str)> = vec![
        (vec!["frobnicate".into()], "usage"),
        (vec!["build-vocab".into(), "--config".into(), s(&d.join("none.toml")).into(), "--out".into(), "v".into()], "config"),
        (
            vec!["evaluate".into(), "--run".into(), s(&d.join("none.trec")).into(), "--qrels".into(), "x".into()],
            "io",
        ),
    ];
    for (args, category) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = densecrab(&args);
        assert_eq!(out.code, Some(1), "{args:?}");
        assert_eq!(out.stderr.lines().count(), 1, "{}", out.stderr);
        assert!(out.stderr.starts_with(&format!("error: {category}: ")), "{}", out.stderr);
    }
    let help = densecrab(&["--help"]);
    assert!(help.ok() && help.stdout.contains("ablate"));
}

#[test]
fn invalid_config_leaves_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = d.join("vocab.txt");
    let good = write_config(d, &[]);
    densecrab(&["build-vocab", "--config", s(&good), "--out", s(&v)]).assert_ok();

    let bad = write_config(d, &[("info_nce.temperature", toml::Value::Float(0.0))]);
    let m = d.join("model.bin");
    let out = densecrab(&["pretrain", "--config", s(&bad), "--vocab", s(&v), "--out", s(&m)]);
    assert_eq!(out.code, Some(1));
    assert!(out.stderr.starts_with("error: invalid-argument: "), "{}", out.stderr);
    assert!(!m.exists() && !d.join("model.bin.metrics.tsv").exists());

    // a missing seed is a config error
    std::fs::write(d.join("noseed.toml"), "[training]\nsteps = 5\n").unwrap();
    let out = densecrab(&["pretrain", "--config", s(&d.join("noseed.toml")), "--vocab", s(&v), "--out", s(&m)]);
    assert!(out.stderr.starts_with("error: config: "), "{}", out.stderr);
    assert!(!m.exists());

    // a vocabulary larger than the embedding table fails before training
    let small = write_config(d, &[("encoder.vocab_size", toml::Value::Integer(64))]);
    let out = densecrab(&["pretrain", "--config", s(&small), "--vocab", s(&v), "--out", s(&m)]);
    assert_eq!(out.code, Some(1));
    assert!(!m.exists());

    let out = densecrab(&["ablate", "--config", s(&good), "--vocab", s(&v), "--axis", "colour", "--out-dir", s(d)]);
    assert!(out.stderr.starts_with("error: usage: "), "{}", out.stderr);
}

#[test]
fn ablate_framework_axis_emits_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &[("ablate.steps", toml::Value::Integer(20))]);
    let v = d.join("vocab.txt");
    densecrab(&["build-vocab", "--config", s(&cfg), "--out", s(&v)]).assert_ok();
    densecrab(&["ablate", "--config", s(&cfg), "--vocab", s(&v), "--axis", "framework", "--out-dir", s(d)]).assert_ok();
    let t = read(&d.join("framework.tsv"));
    let rows: Vec<&str> = t.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["moco", "simclr"]);
    assert!(d.join("framework.recall.tsv").exists());
    assert!(!d.join("queue-size.tsv").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        densecrab(&[
            "synth", "--out", s(&d.join(format!("{name}.jsonl"))), "--num-docs", "50", "--num-topics", "5",
            "--seed", "4", "--queries", s(&d.join(format!("{name}-q.jsonl"))), "--qrels",
            s(&d.join(format!("{name}-r.tsv"))), "--num-queries", "10",
        ])
        .assert_ok();
    }
    for suffix in [".jsonl", "-q.jsonl", "-r.tsv"] {
        assert_eq!(read(&d.join(format!("a{suffix}"))), read(&d.join(format!("b{suffix}"))));
    }
    assert_eq!(read(&d.join("a.jsonl")).lines().count(), 50);
}
