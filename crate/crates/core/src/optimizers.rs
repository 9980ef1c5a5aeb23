//! DP-SGD, DP-SignSGD and DP-Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::noise::NoiseSpec;
use crate::objectives::Objective;
use crate::privacy::{clip_in_place, PrivacyParams};
use crate::record::{RunRecord, Source};
use crate::rng::{from_seed, StreamRng};
use crate::vecops::{fill_normal, norm_sq};

/// Loss magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DpSgd,
    DpSignSgd,
    DpAdam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DpSgd => "dpsgd",
            Method::DpSignSgd => "dpsignsgd",
            Method::DpAdam => "dpadam",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dpsgd" | "sgd" => Ok(Method::DpSgd),
            "dpsignsgd" | "signsgd" | "sign" => Ok(Method::DpSignSgd),
            "dpadam" | "adam" => Ok(Method::DpAdam),
            other => Err(invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0,1)"));
        }
        if !(self.eps_hat > 0.0) {
            return Err(invalid("adam eps_hat must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η_t = η(1+ηt)^(−0.6)`.
    Decaying,
}

impl LrSchedule {
    pub fn at(self, eta: f64, step: u64) -> f64 {
        match self {
            LrSchedule::Constant => eta,
            LrSchedule::Decaying => eta * (1.0 + eta * step as f64).powf(-0.6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Uniform with replacement.
    #[default]
    Poisson,
    /// Without replacement, reshuffled every epoch.
    Shuffle,
}

impl std::str::FromStr for Sampling {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(Sampling::Poisson),
            "shuffle" => Ok(Sampling::Shuffle),
            other => Err(invalid(format!("unknown sampling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub eta: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub privacy: PrivacyParams,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default)]
    pub sampling: Sampling,
}

impl OptimizerConfig {
    pub fn new(method: Method, eta: f64, privacy: PrivacyParams, noise: NoiseSpec) -> Result<Self> {
        let cfg = Self {
            method,
            eta,
            schedule: LrSchedule::Constant,
            privacy,
            noise,
            adam: AdamParams::default(),
            sampling: Sampling::Poisson,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.noise.batch_size != self.privacy.batch_size {
            return Err(invalid(format!(
                "noise batch size {} differs from privacy batch size {}",
                self.noise.batch_size, self.privacy.batch_size
            )));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub x: Vec<f64>,
    pub k: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(x0: Vec<f64>) -> Self {
        let d = x0.len();
        Self {
            x: x0,
            k: 0,
            m: vec![0.0; d],
            v: vec![0.0; d],
        }
    }
}

/// `x ← x − ηg`.
pub fn step_dpsgd(state: &mut OptimizerState, g: &[f64], eta: f64) {
    for (xi, gi) in state.x.iter_mut().zip(g) {
        *xi -= eta * gi;
    }
    state.k += 1;
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x ← x − η·sign(g)` with `sign(0) = 0`.
pub fn step_dpsignsgd(state: &mut OptimizerState, g: &[f64], eta: f64) {
    for (xi, gi) in state.x.iter_mut().zip(g) {
        *xi -= eta * sign0(*gi);
    }
    state.k += 1;
}

pub fn step_dpadam(state: &mut OptimizerState, g: &[f64], eta: f64, adam: &AdamParams) {
    let t = (state.k + 1) as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for i in 0..state.x.len() {
        let gi = g[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * gi;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * gi * gi;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        state.x[i] -= eta * m_hat / (v_hat.sqrt() + adam.eps_hat);
    }
    state.k += 1;
}

pub fn apply_step(state: &mut OptimizerState, g: &[f64], eta: f64, cfg: &OptimizerConfig) {
    match cfg.method {
        Method::DpSgd => step_dpsgd(state, g, eta),
        Method::DpSignSgd => step_dpsignsgd(state, g, eta),
        Method::DpAdam => step_dpadam(state, g, eta, &cfg.adam),
    }
}

struct Workspace {
    grad: Vec<f64>,
    example: Vec<f64>,
    sum: Vec<f64>,
    dp: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            example: vec![0.0; d],
            sum: vec![0.0; d],
            dp: vec![0.0; d],
        }
    }
}

/// Writes the private gradient into `ws.sum` and returns the number of
/// clipped examples.
fn private_gradient_ws<R: Rng + ?Sized>(
    obj: &Objective,
    x: &[f64],
    batch: &[usize],
    privacy: &PrivacyParams,
    noise: &NoiseSpec,
    rng: &mut R,
    ws: &mut Workspace,
) -> usize {
    let synthetic = obj.n_examples().is_none();
    if synthetic {
        obj.gradient_unchecked(x, &mut ws.grad);
    }
    ws.sum.iter_mut().for_each(|v| *v = 0.0);
    let mut clipped = 0;
    for &i in batch {
        obj.per_example_into(x, &ws.grad, i, noise, rng, &mut ws.example);
        if clip_in_place(&mut ws.example, privacy.clip) < 1.0 {
            clipped += 1;
        }
        for (s, e) in ws.sum.iter_mut().zip(&ws.example) {
            *s += e;
        }
    }
    let b = batch.len() as f64;
    let std = privacy.clip * privacy.sigma_dp / b;
    if std > 0.0 {
        fill_normal(rng, &mut ws.dp);
        for (s, z) in ws.sum.iter_mut().zip(&ws.dp) {
            *s = *s / b + std * z;
        }
    } else {
        ws.sum.iter_mut().for_each(|s| *s /= b);
    }
    clipped
}

/// `(1/B)Σ clip(∇f_i(x), C) + N(0, C²σ_DP²/B² I)` over the given batch.
pub fn private_gradient<R: Rng + ?Sized>(
    obj: &Objective,
    x: &[f64],
    batch: &[usize],
    privacy: &PrivacyParams,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(obj.dim(), x.len())?;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if let Some(n) = obj.n_examples() {
        if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
            return Err(crate::error::Error::IndexOutOfRange { index: bad, len: n });
        }
    }
    let mut ws = Workspace::new(obj.dim());
    private_gradient_ws(obj, x, batch, privacy, noise, rng, &mut ws);
    Ok(ws.sum)
}

struct BatchSampler {
    sampling: Sampling,
    n: usize,
    batch_size: usize,
    perm: Vec<usize>,
    cursor: usize,
    batch: Vec<usize>,
}

impl BatchSampler {
    fn new(sampling: Sampling, n: usize, batch_size: usize) -> Self {
        Self {
            sampling,
            n,
            batch_size,
            perm: (0..n).collect(),
            cursor: n,
            batch: vec![0; batch_size],
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        match self.sampling {
            Sampling::Poisson => {
                for b in self.batch.iter_mut() {
                    *b = rng.random_range(0..self.n);
                }
            }
            Sampling::Shuffle => {
                for b in 0..self.batch_size {
                    if self.cursor >= self.n {
                        self.perm.shuffle(rng);
                        self.cursor = 0;
                    }
                    self.batch[b] = self.perm[self.cursor];
                    self.cursor += 1;
                }
            }
        }
        &self.batch
    }
}

/// Options controlling what a run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordOptions {
    pub record_every: u64,
    pub snapshots: bool,
}

impl RecordOptions {
    pub fn every(record_every: u64) -> Self {
        Self {
            record_every,
            snapshots: false,
        }
    }
}

fn should_record(k: u64, steps: u64, every: u64) -> bool {
    k % every == 0 || k == steps
}

/// Runs `steps` iterations from `x0` on a stream seeded by `seed`.
pub fn run_optimizer(
    obj: &Objective,
    cfg: &OptimizerConfig,
    x0: &[f64],
    steps: u64,
    seed: u64,
    record_every: u64,
) -> Result<RunRecord> {
    let mut rng = from_seed(seed);
    let mut rec = run_optimizer_rng(obj, cfg, x0, steps, RecordOptions::every(record_every), &mut rng)?;
    rec.seed = seed;
    Ok(rec)
}

/// As [`run_optimizer`] but drawing from a caller-supplied stream.
pub fn run_optimizer_rng(
    obj: &Objective,
    cfg: &OptimizerConfig,
    x0: &[f64],
    steps: u64,
    opts: RecordOptions,
    rng: &mut StreamRng,
) -> Result<RunRecord> {
    cfg.validate()?;
    check_dim(obj.dim(), x0.len())?;
    if steps == 0 {
        return Err(invalid("T must be >= 1"));
    }
    if opts.record_every == 0 {
        return Err(invalid("record_every must be >= 1"));
    }
    let d = obj.dim();
    let b = cfg.privacy.batch_size;
    let n = obj.n_examples().unwrap_or(cfg.privacy.n.max(b));
    if b > n {
        return Err(invalid(format!("batch size {b} exceeds dataset size {n}")));
    }
    let mut sampler = BatchSampler::new(cfg.sampling, n, b);
    let synthetic_batch: Vec<usize> = vec![0; b];
    let synthetic = obj.n_examples().is_none();

    let mut rec = RunRecord::new(cfg.method.name(), Source::Optimizer, 0, cfg.eta);
    rec.config = serde_json::to_value(cfg)?;
    let mut state = OptimizerState::new(x0.to_vec());
    let mut ws = Workspace::new(d);
    let mut gbuf = vec![0.0; d];
    let mut clipped_total = 0usize;

    let record = |state: &OptimizerState, rec: &mut RunRecord, gbuf: &mut [f64]| -> bool {
        let f = obj.value_unchecked(&state.x);
        obj.gradient_unchecked(&state.x, gbuf);
        rec.steps.push(state.k);
        rec.loss.push(f);
        rec.grad_norm_sq.push(norm_sq(gbuf));
        if opts.snapshots {
            rec.snapshots.push(state.x.clone());
        }
        !f.is_finite() || f.abs() > DIVERGENCE_THRESHOLD
    };

    if record(&state, &mut rec, &mut gbuf) {
        rec.diverged = true;
        return Ok(rec);
    }
    for k in 0..steps {
        let batch: &[usize] = if synthetic {
            &synthetic_batch
        } else {
            sampler.next(rng)
        };
        clipped_total += private_gradient_ws(obj, &state.x, batch, &cfg.privacy, &cfg.noise, rng, &mut ws);
        let eta = cfg.schedule.at(cfg.eta, k);
        apply_step(&mut state, &ws.sum, eta, cfg);
        if should_record(state.k, steps, opts.record_every) && record(&state, &mut rec, &mut gbuf) {
            rec.diverged = true;
            break;
        }
    }
    rec.clip_fraction = clipped_total as f64 / (state.k.max(1) as f64 * b as f64);
    Ok(rec)
}
