//! Trajectory records and their CSV/JSON persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Optimizer,
    Sde,
}

/// One trajectory: the recorded loss and squared gradient norm at selected
/// steps, plus optional iterate snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub source: Source,
    pub seed: u64,
    pub eta: f64,
    pub steps: Vec<u64>,
    pub loss: Vec<f64>,
    pub grad_norm_sq: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<Vec<f64>>,
    /// Fraction of per-example gradients that were clipped, averaged over steps.
    pub clip_fraction: f64,
    pub diverged: bool,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn new(label: impl Into<String>, source: Source, seed: u64, eta: f64) -> Self {
        Self {
            label: label.into(),
            source,
            seed,
            eta,
            steps: Vec::new(),
            loss: Vec::new(),
            grad_norm_sq: Vec::new(),
            snapshots: Vec::new(),
            clip_fraction: 0.0,
            diverged: false,
            config: serde_json::Value::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss.last().copied()
    }

    /// Mean of the last `k` recorded losses.
    pub fn tail_mean_loss(&self, k: usize) -> Option<f64> {
        if self.loss.is_empty() || k == 0 {
            return None;
        }
        let k = k.min(self.loss.len());
        let tail = &self.loss[self.loss.len() - k..];
        Some(tail.iter().sum::<f64>() / k as f64)
    }

    /// First recorded step at which the loss is at most `fraction·f(x₀)`.
    pub fn time_to_fraction(&self, fraction: f64) -> Option<u64> {
        let f0 = *self.loss.first()?;
        let target = fraction * f0;
        self.steps
            .iter()
            .zip(&self.loss)
            .find(|(_, l)| **l <= target)
            .map(|(s, _)| *s)
    }

    /// Writes `step,loss,grad_norm_sq,diverged`; SDE records carry an extra
    /// `source` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv_to(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let sde = self.source == Source::Sde;
        let header = if sde {
            "step,loss,grad_norm_sq,diverged,source"
        } else {
            "step,loss,grad_norm_sq,diverged"
        };
        writeln!(w, "{header}")?;
        let last = self.steps.len().saturating_sub(1);
        for (i, ((s, l), g)) in self.steps.iter().zip(&self.loss).zip(&self.grad_norm_sq).enumerate() {
            let flag = u8::from(self.diverged && i == last);
            if sde {
                writeln!(w, "{s},{l},{g},{flag},sde")?;
            } else {
                writeln!(w, "{s},{l},{g},{flag}")?;
            }
        }
        Ok(())
    }

    /// JSON sidecar with everything except the time series.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let side = serde_json::json!({
            "label": self.label,
            "source": self.source,
            "seed": self.seed,
            "eta": self.eta,
            "points": self.steps.len(),
            "clip_fraction": self.clip_fraction,
            "diverged": self.diverged,
            "config": self.config,
        });
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &side)?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        self.write_csv(&csv)?;
        self.write_sidecar(&json)?;
        Ok((csv, json))
    }
}
