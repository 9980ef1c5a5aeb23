//! `results.csv` long format and `manifest.json`.

use std::io::Write;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

pub const RESULTS_HEADER: [&str; 11] = [
    "experiment",
    "method",
    "epsilon",
    "eta",
    "C",
    "B",
    "rep_count",
    "metric",
    "value",
    "stderr",
    "diverged",
];

/// One long-format result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub epsilon: f64,
    pub eta: f64,
    pub clip: f64,
    pub batch: usize,
    pub rep_count: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub diverged: bool,
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        other => other
            .parse()
            .map_err(|_| crate::error::Error::Parse(format!("bad number '{other}'"))),
    }
}

impl ResultRow {
    fn record(&self) -> [String; 11] {
        [
            self.experiment.clone(),
            self.method.clone(),
            fmt_f64(self.epsilon),
            fmt_f64(self.eta),
            fmt_f64(self.clip),
            self.batch.to_string(),
            self.rep_count.to_string(),
            self.metric.clone(),
            fmt_f64(self.value),
            fmt_f64(self.stderr),
            u8::from(self.diverged).to_string(),
        ]
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_results(file, rows)
}

pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| crate::error::Error::Csv(e.into()))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        out.push(ResultRow {
            experiment: get(0).to_string(),
            method: get(1).to_string(),
            epsilon: parse_f64(get(2))?,
            eta: parse_f64(get(3))?,
            clip: parse_f64(get(4))?,
            batch: get(5).parse().map_err(|_| crate::error::Error::Parse("bad B".into()))?,
            rep_count: get(6).parse().map_err(|_| crate::error::Error::Parse("bad rep_count".into()))?,
            metric: get(7).to_string(),
            value: parse_f64(get(8))?,
            stderr: parse_f64(get(9))?,
            diverged: get(10) == "1",
        });
    }
    Ok(out)
}

/// `git describe --always --dirty`, or `"unknown"` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn write_manifest(path: &Path, config: &serde_json::Value, seed: u64) -> Result<()> {
    let manifest = serde_json::json!({
        "config": config,
        "git_describe": git_describe(),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
