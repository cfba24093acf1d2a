use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nucdistill::metrics::{pca_components, Matrix, PCA_THRESHOLDS};
use nucdistill::teacher::load_dump;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nucdistill"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_fixtures_writes_shard_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shards");
    let stdout = ok(&[
        "--seed",
        "1",
        "ingest",
        "--in",
        s(&fixture("three.gbff")),
        s(&fixture("three.gbff.gz")),
        "--total",
        "10",
        "--out",
        s(&out),
    ]);
    let stats: Value = serde_json::from_str(stdout.trim()).unwrap();
    // The gzip copy repeats every accession, so half the pool is dropped.
    assert_eq!(stats["records_seen"], 6);
    assert_eq!(stats["records_kept"], 3);
    assert_eq!(stats["duplicates_dropped"], 3);
    let shard = nucdistill::genbank::read_shard(&out.join("shard_000.mrnashrd")).unwrap();
    let mut acc: Vec<&str> = shard.iter().map(|r| r.accession.as_str()).collect();
    acc.sort();
    assert_eq!(acc, ["NM_TEST1", "NM_TEST2", "NM_TEST3"]);
    assert!(out.join("manifest.json").is_file());

    let toks = dir.path().join("t.mrnatoks");
    ok(&[
        "tokenize",
        "--shards",
        s(&out.join("shard_000.mrnashrd")),
        "--context-len",
        "8",
        "--out",
        s(&toks),
    ]);
    let ds = nucdistill::dataset::TokenDataset::load(&toks).unwrap();
    assert_eq!((ds.len(), ds.context_len()), (3, 8));
}

fn pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let toks = dir.join("data/c.mrnatoks");
    let dump = dir.join("data/c.hnanodump");
    ok(&[
        "--seed",
        "5",
        "tokenize",
        "--synthetic",
        "96",
        "--context-len",
        "128",
        "--out",
        s(&toks),
    ]);
    ok(&[
        "--seed",
        "5",
        "--out-dir",
        s(dir),
        "teacher",
        "--tokens",
        s(&toks),
        "--preset",
        "norm-like",
        "--logits",
        "uniform",
        "--out",
        s(&dump),
    ]);
    (toks, dump)
}

#[test]
fn train_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (toks, dump) = pipeline(dir.path());
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&[
            "--seed",
            "7",
            "--out-dir",
            s(&out),
            "train",
            "--tokens",
            s(&toks),
            "--teacher-dump",
            s(&dump),
            "--max-steps",
            "100",
        ]);
        logs.push(fs::read(out.join("metrics.jsonl")).unwrap());
        let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["subcommand"], "train");
        assert_eq!(manifest["seed"], 7);
        assert_eq!(manifest["outputs"]["steps"], 100);
        assert!(out.join("final.hnanockp").is_file());
    }
    assert_eq!(logs[0], logs[1]);
    assert!(logs[0].iter().filter(|&&b| b == b'\n').count() >= 100);

    // A sequential run logs the same bytes.
    let out = dir.path().join("seq");
    ok(&[
        "--seed",
        "7",
        "--sequential",
        "--out-dir",
        s(&out),
        "train",
        "--tokens",
        s(&toks),
        "--teacher-dump",
        s(&dump),
        "--max-steps",
        "100",
    ]);
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap(), logs[0]);

    let run_dir = dir.path().join("a");
    ok(&["report", "--run-dir", s(&run_dir)]);
    for f in [
        "loss_curves.csv",
        "grad_norm_variance.csv",
        "cosine_per_tap.csv",
        "mse.csv",
        "cka.csv",
        "entropy_summary.csv",
        "entropy_profile.csv",
    ] {
        assert!(run_dir.join("report").join(f).is_file(), "{f}");
    }

    let eval_dir = dir.path().join("eval");
    ok(&[
        "--out-dir",
        s(&eval_dir),
        "eval",
        "--checkpoint",
        s(&run_dir.join("final.hnanockp")),
        "--tokens",
        s(&toks),
        "--teacher-dump",
        s(&dump),
    ]);
    let eval: Value = serde_json::from_slice(&fs::read(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["loss_total"].as_f64().is_some());
}

#[test]
fn pca_table_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dump) = pipeline(dir.path());
    let out = dir.path().join("pca");
    let stdout = ok(&["--out-dir", s(&out), "pca", "--dump", s(&dump), "--layer", "1"]);
    let d = load_dump(&dump).unwrap();
    let rows: Vec<Vec<f32>> = d.outputs.iter().map(|o| o.embeddings[1].clone()).collect();
    let p = pca_components(&Matrix::from_f32_rows(&rows).unwrap(), &PCA_THRESHOLDS).unwrap();
    let mut want = String::from("threshold,components\n");
    for (t, k) in p.components_at {
        want.push_str(&format!("{t},{k}\n"));
    }
    assert_eq!(stdout, want);
    assert_eq!(fs::read_to_string(out.join("pca.csv")).unwrap(), want);
}

#[test]
fn entropy_of_uniform_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (toks, dump) = pipeline(dir.path());
    let out = dir.path().join("ent");
    let stdout = ok(&[
        "--out-dir",
        s(&out),
        "entropy",
        "--dump",
        s(&dump),
        "--tokens",
        s(&toks),
        "--sequences",
        "10",
    ]);
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!((v["entropy_mean"].as_f64().unwrap() - 4f64.ln()).abs() <= 1e-9);
    assert_eq!(v["mean_token_prob"].as_f64().unwrap(), 0.25);
    assert!(out.join("entropy_profile.csv").is_file());
}

fn error_line(out: &Output) -> Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn failures_exit_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.hnanodump");
    let out = run(&["--out-dir", s(dir.path()), "pca", "--dump", s(&missing), "--layer", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("nope.hnanodump"));

    let out = run(&["report", "--run-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.gbff");
    fs::write(&bad, "LOCUS only\n").unwrap();
    let out = run(&["ingest", "--in", s(&bad), "--targets", "50,50,50,0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "config");
}
