//! Loss functions with full and per-example gradient access.
//!
//! Quadratic and quartic objectives have no data: their per-example gradients
//! are synthesized as `∇f(x) + Z` with `Z` drawn from a [`NoiseSpec`].
//! Logistic regression uses real rows and ignores the noise spec.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, io_err, Error, Result};
use crate::noise::{sample_per_example_noise_into, NoiseSpec};
use crate::rng;
use crate::vecops::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticParams {
    pub h: Vec<f64>,
}

impl QuadraticParams {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(invalid("quadratic needs d >= 1"));
        }
        if let Some(bad) = h.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!("quadratic eigenvalues must be finite and >= 0, got {bad}")));
        }
        Ok(Self { h })
    }

    pub fn isotropic(d: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarticParams {
    pub h: Vec<f64>,
    pub lambda: f64,
    pub xi: f64,
}

impl QuarticParams {
    pub fn new(h: Vec<f64>, lambda: f64, xi: f64) -> Result<Self> {
        if h.is_empty() {
            return Err(invalid("quartic needs d >= 1"));
        }
        if h.iter().chain([&lambda, &xi]).any(|v| !v.is_finite()) {
            return Err(invalid("quartic parameters must be finite"));
        }
        Ok(Self { h, lambda, xi })
    }
}

/// Row-major `n × d` features with labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticDataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    n: usize,
    d: usize,
}

impl LogisticDataset {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(invalid("logistic dataset needs d >= 1"));
        }
        let n = labels.len();
        if n == 0 {
            return Err(invalid("logistic dataset needs n >= 1"));
        }
        check_dim(n * d, features.len())?;
        if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(invalid(format!("labels must be 0 or 1, got {bad}")));
        }
        Ok(Self { features, labels, n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((1..=self.d).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut rec = vec![format!("{}", self.labels[i] as u8)];
            rec.extend(self.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("label") {
            return Err(Error::Parse(format!("{}: first column must be 'label'", path.display())));
        }
        let d = header.len() - 1;
        for (j, name) in header.iter().skip(1).enumerate() {
            if name != format!("f{}", j + 1) {
                return Err(Error::Parse(format!("{}: unexpected column '{name}'", path.display())));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}: bad number '{s}'", path.display())))
            };
            labels.push(parse(&rec[0])?);
            for j in 1..=d {
                features.push(parse(&rec[j])?);
            }
        }
        Self::new(features, labels, d)
    }

    /// Sparse `label idx:val ...` text with 1-based indices. Features above
    /// `max_feature` are dropped; labels `-1`/`+1` map to `0`/`1`.
    pub fn load_libsvm(path: &Path, max_feature: usize) -> Result<Self> {
        if max_feature == 0 {
            return Err(invalid("max_feature must be >= 1"));
        }
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::Parse(format!("{}:{}: {what}", path.display(), lineno + 1));
            let y: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad label"))?;
            labels.push(if y > 0.0 { 1.0 } else { 0.0 });
            let start = features.len();
            features.resize(start + max_feature, 0.0);
            for tok in parts {
                let (idx, val) = tok.split_once(':').ok_or_else(|| bad("expected idx:val"))?;
                let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
                let val: f64 = val.parse().map_err(|_| bad("bad value"))?;
                if idx == 0 {
                    return Err(bad("indices are 1-based"));
                }
                if idx <= max_feature {
                    features[start + idx - 1] = val;
                }
            }
        }
        Self::new(features, labels, max_feature)
    }
}

/// Two Gaussian blobs with unit covariance and class means `±(separation/2)·e₁`.
/// Labels alternate so both classes have the same size up to one example.
pub fn make_synthetic_logistic(n: usize, d: usize, separation: f64, seed: u64) -> Result<LogisticDataset> {
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be >= 1"));
    }
    let mut r = rng::from_seed(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as f64;
        let shift = if y == 1.0 { separation / 2.0 } else { -separation / 2.0 };
        for j in 0..d {
            let z: f64 = r.sample(StandardNormal);
            features.push(if j == 0 { z + shift } else { z });
        }
        labels.push(y);
    }
    LogisticDataset::new(features, labels, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Quadratic,
    Quartic,
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic(QuadraticParams),
    Quartic(QuarticParams),
    Logistic(LogisticDataset),
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Objective {
    pub fn quadratic(h: Vec<f64>) -> Result<Self> {
        Ok(Objective::Quadratic(QuadraticParams::new(h)?))
    }

    pub fn quartic(h: Vec<f64>, lambda: f64, xi: f64) -> Result<Self> {
        Ok(Objective::Quartic(QuarticParams::new(h, lambda, xi)?))
    }

    pub fn logistic(data: LogisticDataset) -> Self {
        Objective::Logistic(data)
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Objective::Quadratic(_) => ObjectiveKind::Quadratic,
            Objective::Quartic(_) => ObjectiveKind::Quartic,
            Objective::Logistic(_) => ObjectiveKind::Logistic,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic(p) => p.h.len(),
            Objective::Quartic(p) => p.h.len(),
            Objective::Logistic(data) => data.d,
        }
    }

    /// Number of examples for data-backed objectives.
    pub fn n_examples(&self) -> Option<usize> {
        match self {
            Objective::Logistic(data) => Some(data.n),
            _ => None,
        }
    }

    /// Diagonal Hessian for the quadratic, `None` otherwise.
    pub fn hessian_diag(&self) -> Option<&[f64]> {
        match self {
            Objective::Quadratic(p) => Some(&p.h),
            _ => None,
        }
    }

    /// Smoothness constant. For the quartic this is the curvature at the
    /// origin; for logistic regression `λ_max(XᵀX)/(4n)` by power iteration.
    pub fn smoothness(&self) -> f64 {
        match self {
            Objective::Quadratic(p) => p.h.iter().cloned().fold(0.0, f64::max),
            Objective::Quartic(p) => p.h.iter().map(|v| v.abs()).fold(0.0, f64::max),
            Objective::Logistic(data) => logistic_smoothness(data),
        }
    }

    /// PL constant, 0 when unknown.
    pub fn pl_constant(&self) -> f64 {
        match self {
            Objective::Quadratic(p) => {
                let m = p.h.iter().cloned().fold(f64::INFINITY, f64::min);
                if m > 0.0 {
                    m
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.value_unchecked(x))
    }

    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Objective::Quadratic(p) => 0.5 * p.h.iter().zip(x).map(|(h, v)| h * v * v).sum::<f64>(),
            Objective::Quartic(p) => {
                let mut s = 0.0;
                for (h, v) in p.h.iter().zip(x) {
                    let v2 = v * v;
                    s += 0.5 * h * v2 + p.lambda / 4.0 * v2 * v2 - p.xi / 3.0 * v2 * v;
                }
                s
            }
            Objective::Logistic(data) => {
                let mut s = 0.0;
                for i in 0..data.n {
                    let z = dot(data.row(i), x);
                    s += softplus(z) - data.labels[i] * z;
                }
                s / data.n as f64
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(x, &mut out)?;
        Ok(out)
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), out.len())?;
        self.gradient_unchecked(x, out);
        Ok(())
    }

    pub(crate) fn gradient_unchecked(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Objective::Quadratic(p) => {
                for ((o, h), v) in out.iter_mut().zip(&p.h).zip(x) {
                    *o = h * v;
                }
            }
            Objective::Quartic(p) => {
                for ((o, h), v) in out.iter_mut().zip(&p.h).zip(x) {
                    *o = h * v + p.lambda * v * v * v - p.xi * v * v;
                }
            }
            Objective::Logistic(data) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..data.n {
                    let row = data.row(i);
                    let r = sigmoid(dot(row, x)) - data.labels[i];
                    for (o, f) in out.iter_mut().zip(row) {
                        *o += r * f;
                    }
                }
                let n = data.n as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
    }

    /// `∇f_i(x)`. Data-backed objectives use row `index`; synthetic ones
    /// return `∇f(x) + Z` with `Z` drawn from `noise` and ignore `index`.
    pub fn per_example_gradient<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        index: usize,
        noise: &NoiseSpec,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        if let Some(n) = self.n_examples() {
            if index >= n {
                return Err(Error::IndexOutOfRange { index, len: n });
            }
        }
        let mut grad = vec![0.0; self.dim()];
        let mut out = vec![0.0; self.dim()];
        if self.n_examples().is_none() {
            self.gradient_unchecked(x, &mut grad);
        }
        self.per_example_into(x, &grad, index, noise, rng, &mut out);
        Ok(out)
    }

    /// Fast path used by the optimizer loop. `full_grad` must hold `∇f(x)`
    /// for synthetic objectives and is ignored for data-backed ones.
    pub(crate) fn per_example_into<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        full_grad: &[f64],
        index: usize,
        noise: &NoiseSpec,
        rng: &mut R,
        out: &mut [f64],
    ) {
        match self {
            Objective::Logistic(data) => {
                let row = data.row(index);
                let r = sigmoid(dot(row, x)) - data.labels[index];
                for (o, f) in out.iter_mut().zip(row) {
                    *o = r * f;
                }
            }
            _ => {
                sample_per_example_noise_into(noise, rng, out);
                for (o, g) in out.iter_mut().zip(full_grad) {
                    *o += g;
                }
            }
        }
    }
}

fn logistic_smoothness(data: &LogisticDataset) -> f64 {
    let d = data.d;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut w = vec![0.0; d];
        for i in 0..data.n {
            let row = data.row(i);
            let s = dot(row, &v);
            for (wj, r) in w.iter_mut().zip(row) {
                *wj += s * r;
            }
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        lambda = nw;
        v = w.into_iter().map(|x| x / nw).collect();
    }
    lambda / (4.0 * data.n as f64)
}
