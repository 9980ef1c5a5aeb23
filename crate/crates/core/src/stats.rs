//! Sample statistics, regressions and a normality test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    /// Standard error of the mean.
    pub se: f64,
}

/// Two-pass sample moments.
pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len();
    if n == 0 {
        return Moments {
            n,
            mean: f64::NAN,
            var: f64::NAN,
            se: f64::NAN,
        };
    }
    let shift = xs[0];
    let mean = shift + xs.iter().map(|x| x - shift).sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Moments {
        n,
        mean,
        var,
        se: (var / n as f64).sqrt(),
    }
}

/// One-pass Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingMoments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl StreamingMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &StreamingMoments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.mean += delta * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn finish(&self) -> Moments {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        Moments {
            n: self.n,
            mean: if self.n == 0 { f64::NAN } else { self.mean },
            var,
            se: (var / self.n as f64).sqrt(),
        }
    }
}

/// Per-checkpoint ensemble statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    pub checkpoints: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Standard error of the sample variance, `√((m₄ − s⁴)/R)`.
    pub var_se: Vec<f64>,
}

/// `trajectories[r][j]` is repetition `r` at recorded index `j`.
pub fn estimate_moments(trajectories: &[Vec<f64>], checkpoints: &[usize]) -> Result<EnsembleMoments> {
    if trajectories.len() < 2 {
        return Err(Error::InsufficientData("need at least two trajectories".into()));
    }
    let r = trajectories.len() as f64;
    let mut out = EnsembleMoments {
        checkpoints: checkpoints.to_vec(),
        mean: Vec::with_capacity(checkpoints.len()),
        var: Vec::with_capacity(checkpoints.len()),
        mean_se: Vec::with_capacity(checkpoints.len()),
        var_se: Vec::with_capacity(checkpoints.len()),
    };
    let mut col = Vec::with_capacity(trajectories.len());
    for &j in checkpoints {
        col.clear();
        for t in trajectories {
            col.push(*t.get(j).ok_or_else(|| invalid(format!("checkpoint {j} beyond a trajectory of length {}", t.len())))?);
        }
        let m = moments(&col);
        let m4 = col.iter().map(|x| (x - m.mean).powi(4)).sum::<f64>() / r;
        let pop_var = m.var * (r - 1.0) / r;
        out.mean.push(m.mean);
        out.var.push(m.var);
        out.mean_se.push(m.se);
        out.var_se.push(((m4 - pop_var * pop_var).max(0.0) / r).sqrt());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    crate::error::check_dim(x.len(), y.len())?;
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData("regression needs at least two points".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("regression needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LinearFit { slope, intercept, r2, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub used: usize,
    pub dropped: Vec<f64>,
}

/// Least squares on `(ln ε, ln(y − baseline))`. Points whose excess is not
/// positive are dropped with a warning.
pub fn fit_power_law(points: &[(f64, f64)], baseline: Option<f64>) -> Result<PowerLawFit> {
    let base = baseline.unwrap_or(0.0);
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut dropped = Vec::new();
    for &(e, y) in points {
        let excess = y - base;
        if e > 0.0 && e.is_finite() && excess > 0.0 && excess.is_finite() {
            lx.push(e.ln());
            ly.push(excess.ln());
        } else {
            dropped.push(e);
        }
    }
    if !dropped.is_empty() {
        log::warn!("power-law fit dropped {} non-positive points at eps = {:?}", dropped.len(), dropped);
    }
    if lx.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "power-law fit needs 3 usable points, got {}",
            lx.len()
        )));
    }
    let fit = linear_regression(&lx, &ly)?;
    Ok(PowerLawFit {
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        used: lx.len(),
        dropped,
    })
}

/// One-sample Kolmogorov–Smirnov statistic against `N(0,1)` and its
/// asymptotic p-value.
pub fn ks_standard_normal(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("KS test needs samples".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, x) in xs.iter().enumerate() {
        let f = normal.cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok((d, kolmogorov_pvalue(d, n)))
}

fn kolmogorov_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
