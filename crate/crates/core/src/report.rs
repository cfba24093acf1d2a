//! Plot-ready CSV tables derived from `metrics.jsonl`, one per figure of the
//! training diagnostics. Nothing is recomputed from model passes.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Parses a metrics log into JSON objects, one per line.
pub fn read_metrics(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l)?;
            if !v.is_object() {
                return Err(Error::Format(format!("metrics line {} is not an object", i + 1)));
            }
            Ok(v)
        })
        .collect()
}

fn cell(v: Option<&Value>) -> String {
    match v {
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Bool(b)) => b.to_string(),
        _ => String::new(),
    }
}

/// Largest `k` such that `{prefix}{k}` appears in any record.
fn tap_count(records: &[Value], prefix: &str) -> usize {
    records
        .iter()
        .filter_map(Value::as_object)
        .flat_map(|m| m.keys())
        .filter_map(|k| k.strip_prefix(prefix)?.parse::<usize>().ok())
        .max()
        .unwrap_or(0)
}

fn is_split(r: &Value, split: &str) -> bool {
    r.get("split").and_then(Value::as_str) == Some(split)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    /// One row per record, reading each header column as a field name.
    fn from_records<'a>(header: Vec<String>, records: impl Iterator<Item = &'a Value>) -> Self {
        let mut t = Self::new(header);
        for r in records {
            let row = t.header.iter().map(|h| cell(r.get(h))).collect();
            t.rows.push(row);
        }
        t
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io_at(path, e))
    }
}

fn cols(fixed: &[&str], tapped: &[&str], taps: usize) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    for t in 1..=taps {
        for name in tapped {
            h.push(format!("{name}_tap{t}"));
        }
    }
    h
}

/// Writes every table into `out_dir` and returns the paths written.
pub fn write_report(records: &[Value], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Usage("metrics log is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let taps = tap_count(records, "loss_cos_tap");
    let val = || records.iter().filter(|r| is_split(r, "val"));

    let mut loss = Table::new(
        ["step", "split", "loss_total", "loss_cos_mean", "loss_mse_mean", "kl"]
            .map(String::from)
            .to_vec(),
    );
    for r in records {
        let mean = |prefix: &str| {
            let vs: Vec<f64> = (1..=taps)
                .filter_map(|t| r.get(format!("{prefix}{t}")).and_then(Value::as_f64))
                .collect();
            if vs.is_empty() {
                String::new()
            } else {
                (vs.iter().sum::<f64>() / vs.len() as f64).to_string()
            }
        };
        loss.rows.push(vec![
            cell(r.get("step")),
            cell(r.get("split")),
            cell(r.get("loss_total")),
            mean("loss_cos_tap"),
            mean("loss_mse_tap"),
            cell(r.get("kl")),
        ]);
    }

    let mut tables = vec![
        ("loss_curves.csv", loss),
        (
            "grad_norm_variance.csv",
            Table::from_records(
                cols(
                    &[
                        "step",
                        "split",
                        "grad_norm",
                        "grad_norm_clipped",
                        "emb_var",
                        "emb_norm",
                        "proj_var",
                        "proj_norm",
                    ],
                    &[],
                    0,
                ),
                records.iter(),
            ),
        ),
        (
            "cosine_per_tap.csv",
            Table::from_records(cols(&["step", "split"], &["loss_cos"], taps), records.iter()),
        ),
        (
            "mse.csv",
            Table::from_records(cols(&["step", "split"], &["loss_mse"], taps), records.iter()),
        ),
        (
            "cka.csv",
            Table::from_records(
                cols(&["step"], &["cka_pre", "cka_post", "cka_raw_pre", "cka_raw_post"], taps),
                val(),
            ),
        ),
        (
            "entropy_summary.csv",
            Table::from_records(
                cols(
                    &[
                        "step",
                        "entropy_mean",
                        "entropy_max",
                        "entropy_spikes",
                        "mean_token_prob",
                        "uniform_entropy",
                        "uniform_prob",
                        "student_entropy_mean",
                    ],
                    &[],
                    0,
                ),
                val(),
            ),
        ),
    ];

    let mut profile = Table::new(["step", "position", "entropy", "uniform_entropy"].map(String::from).to_vec());
    if let Some(r) = records
        .iter()
        .rfind(|r| is_split(r, "val") && r.get("entropy_profile").is_some_and(Value::is_array))
    {
        let step = cell(r.get("step"));
        let uniform = cell(r.get("uniform_entropy"));
        for (p, h) in r["entropy_profile"].as_array().into_iter().flatten().enumerate() {
            profile.rows.push(vec![step.clone(), p.to_string(), cell(Some(h)), uniform.clone()]);
        }
    }
    tables.push(("entropy_profile.csv", profile));

    let mut written = Vec::with_capacity(tables.len());
    for (name, t) in &tables {
        let path = out_dir.join(name);
        t.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads `run_dir/metrics.jsonl` and writes the tables into `out_dir`.
pub fn report(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let path = run_dir.join(METRICS_FILE);
    if !path.is_file() {
        return Err(Error::Usage(format!("{} not found", path.display())));
    }
    write_report(&read_metrics(&path)?, out_dir)
}
