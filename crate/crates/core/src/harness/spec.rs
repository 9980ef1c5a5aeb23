//! Sweep configuration documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, io_err, Error, Result};
use crate::noise::{NoiseSpec, Nu};
use crate::objectives::{make_synthetic_logistic, LogisticDataset, Objective};
use crate::optimizers::{AdamParams, LrSchedule, Method, OptimizerConfig, Sampling};
use crate::privacy::{CalibrationMode, PrivacyParams};
use crate::rng::from_seed;
use crate::sde::SdeLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SdeValidate,
    Scaling,
    Speed,
    EpsStar,
    ProtocolB,
    Stationary,
    WeakError,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SdeValidate => "sde_validate",
            Experiment::Scaling => "scaling",
            Experiment::Speed => "speed",
            Experiment::EpsStar => "eps_star",
            Experiment::ProtocolB => "protocol_b",
            Experiment::Stationary => "stationary",
            Experiment::WeakError => "weak_error",
        }
    }
}

/// A privacy budget that may be infinite. Written as a number, or as
/// `"inf"`/`null` for the non-private limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget(pub f64);

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
            Null(()),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v > 0.0 => Ok(Budget(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("epsilon must be > 0, got {v}"))),
            Raw::Null(()) => Ok(Budget(f64::INFINITY)),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" => Ok(Budget(f64::INFINITY)),
                other => other
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v > 0.0)
                    .map(Budget)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad epsilon '{t}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiagSpec {
    Explicit(Vec<f64>),
    Isotropic { d: usize, value: f64 },
    LogSpaced { d: usize, log10_min: f64, log10_max: f64 },
}

impl DiagSpec {
    pub fn build(&self) -> Result<Vec<f64>> {
        match self {
            DiagSpec::Explicit(h) => Ok(h.clone()),
            DiagSpec::Isotropic { d, value } => Ok(vec![*value; *d]),
            DiagSpec::LogSpaced { d, log10_min, log10_max } => {
                if *d == 0 {
                    return Err(invalid("diagonal needs d >= 1"));
                }
                if *d == 1 {
                    return Ok(vec![10f64.powf(*log10_min)]);
                }
                let step = (log10_max - log10_min) / (*d as f64 - 1.0);
                Ok((0..*d).map(|i| 10f64.powf(log10_min + step * i as f64)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    Quadratic { diag: DiagSpec },
    Quartic { diag: DiagSpec, lambda: f64, xi: f64 },
    Logistic { n: usize, d: usize, separation: f64, seed: u64 },
    LogisticCsv { path: PathBuf },
    LogisticLibsvm { path: PathBuf, max_feature: usize },
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Objective> {
        match self {
            ObjectiveSpec::Quadratic { diag } => Objective::quadratic(diag.build()?),
            ObjectiveSpec::Quartic { diag, lambda, xi } => Objective::quartic(diag.build()?, *lambda, *xi),
            ObjectiveSpec::Logistic { n, d, separation, seed } => {
                Ok(Objective::logistic(make_synthetic_logistic(*n, *d, *separation, *seed)?))
            }
            ObjectiveSpec::LogisticCsv { path } => Ok(Objective::logistic(LogisticDataset::load_csv(path)?)),
            ObjectiveSpec::LogisticLibsvm { path, max_feature } => {
                Ok(Objective::logistic(LogisticDataset::load_libsvm(path, *max_feature)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Spec {
    Explicit(Vec<f64>),
    Fill { fill: f64 },
    /// `std·N(0, I)` drawn once from `seed`.
    Gaussian { std: f64, seed: u64 },
}

impl Default for X0Spec {
    fn default() -> Self {
        X0Spec::Fill { fill: 0.0 }
    }
}

impl X0Spec {
    pub fn build(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            X0Spec::Explicit(v) => {
                crate::error::check_dim(d, v.len())?;
                Ok(v.clone())
            }
            X0Spec::Fill { fill } => Ok(vec![*fill; d]),
            X0Spec::Gaussian { std, seed } => {
                let mut rng = from_seed(*seed);
                Ok((0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaGrid {
    Shared(Vec<f64>),
    PerMethod(BTreeMap<Method, Vec<f64>>),
}

impl EtaGrid {
    pub fn for_method(&self, m: Method) -> Result<&[f64]> {
        match self {
            EtaGrid::Shared(v) => Ok(v),
            EtaGrid::PerMethod(map) => map
                .get(&m)
                .map(|v| v.as_slice())
                .ok_or_else(|| invalid(format!("no eta grid for method {m}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSettings {
    /// Model per method; defaults to the phase-2 models.
    #[serde(default)]
    pub models: BTreeMap<Method, SdeLabel>,
    /// Euler–Maruyama substeps per optimizer step (`Δt = η/substeps`).
    #[serde(default = "one_u64")]
    pub substeps: u64,
    /// Constant clip fraction for mixed models; measured from the paired
    /// discrete ensemble when absent.
    #[serde(default)]
    pub mixed_p: Option<f64>,
    #[serde(default = "default_phase1_samples")]
    pub phase1_samples: usize,
    /// Leading fraction of steps excluded from discrepancy statistics.
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
}

impl Default for SdeSettings {
    fn default() -> Self {
        Self {
            models: BTreeMap::new(),
            substeps: 1,
            mixed_p: None,
            phase1_samples: default_phase1_samples(),
            burn_in: default_burn_in(),
        }
    }
}

impl SdeSettings {
    pub fn model_for(&self, m: Method) -> Result<SdeLabel> {
        if let Some(l) = self.models.get(&m) {
            return Ok(*l);
        }
        match m {
            Method::DpSgd => Ok(SdeLabel::SgdP2),
            Method::DpSignSgd => Ok(SdeLabel::SignP2Exact),
            Method::DpAdam => Err(invalid("no SDE model for DP-Adam")),
        }
    }
}

fn one_u64() -> u64 {
    1
}

fn default_phase1_samples() -> usize {
    64
}

fn default_burn_in() -> f64 {
    0.02
}

fn default_tail() -> usize {
    5
}

fn default_nu() -> Nu {
    Nu::Infinite
}

/// One experiment: objective, method and hyperparameter grids, and
/// Monte-Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment: Experiment,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub x0: X0Spec,
    pub methods: Vec<Method>,
    pub eta: EtaGrid,
    /// Extra DP-SGD learning rates searched only by the tuned variant in
    /// Protocol B.
    #[serde(default)]
    pub eta_extension: Vec<f64>,
    #[serde(rename = "C")]
    pub clip: Vec<f64>,
    #[serde(rename = "B")]
    pub batch: Vec<usize>,
    #[serde(default)]
    pub epsilon: Option<Vec<Budget>>,
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
    pub n: usize,
    pub delta: f64,
    #[serde(default)]
    pub calibration: CalibrationMode,
    pub sigma_gamma: f64,
    #[serde(default = "default_nu")]
    pub nu: Nu,
    /// Number of optimizer steps `T`. Weak-error runs derive it from `tau`.
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "one_u64")]
    pub record_every: u64,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub adam: AdamParams,
    /// Reuse the random streams of a cell across privacy levels.
    #[serde(default)]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub sde: SdeSettings,
    /// Number of trailing records averaged into the final loss.
    #[serde(default = "default_tail")]
    pub tail: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let spec: SweepSpec =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("methods grid is empty"));
        }
        for m in &self.methods {
            let g = self.eta.for_method(*m)?;
            if g.is_empty() {
                return Err(invalid(format!("eta grid for {m} is empty")));
            }
            if g.iter().any(|e| !(*e > 0.0)) {
                return Err(invalid("eta values must be > 0"));
            }
        }
        if self.clip.is_empty() || self.clip.iter().any(|c| !(*c > 0.0)) {
            return Err(invalid("C grid must be non-empty with positive entries"));
        }
        if self.batch.is_empty() || self.batch.iter().any(|b| *b == 0 || *b > self.n) {
            return Err(invalid("B grid must be non-empty with 1 <= B <= n"));
        }
        match (&self.epsilon, &self.sigma) {
            (Some(e), None) if !e.is_empty() => {}
            (None, Some(s)) if !s.is_empty() => {
                if s.iter().any(|v| !(*v >= 0.0)) {
                    return Err(invalid("sigma grid entries must be >= 0"));
                }
            }
            _ => return Err(invalid("give exactly one non-empty grid: 'epsilon' or 'sigma'")),
        }
        if self.reps == 0 {
            return Err(invalid("reps must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be >= 1"));
        }
        if self.experiment == Experiment::WeakError {
            if !self.tau.is_some_and(|t| t > 0.0) {
                return Err(invalid("weak_error needs tau > 0"));
            }
        } else if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.tail == 0 {
            return Err(invalid("tail must be >= 1"));
        }
        if self.sde.substeps == 0 {
            return Err(invalid("sde.substeps must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0,1)"));
        }
        NoiseSpec::new(self.sigma_gamma, self.nu, 1)?;
        Ok(())
    }

    pub fn privacy_len(&self) -> usize {
        match (&self.epsilon, &self.sigma) {
            (Some(e), _) => e.len(),
            (_, Some(s)) => s.len(),
            _ => 0,
        }
    }

    pub fn noise(&self, batch: usize) -> Result<NoiseSpec> {
        NoiseSpec::new(self.sigma_gamma, self.nu, batch)
    }

    /// Privacy parameters for grid entry `index` at the given `(B, C, T)`.
    pub fn privacy(&self, index: usize, batch: usize, clip: f64, steps: u64) -> Result<PrivacyParams> {
        match (&self.epsilon, &self.sigma) {
            (Some(e), _) => {
                PrivacyParams::from_epsilon(e[index].0, self.delta, self.n, batch, steps, clip, self.calibration)
            }
            (_, Some(s)) => PrivacyParams::from_sigma(s[index], self.delta, self.n, batch, steps, clip, self.calibration),
            _ => Err(invalid("no privacy grid")),
        }
    }

    pub fn optimizer_config(&self, method: Method, eta: f64, privacy: PrivacyParams) -> Result<OptimizerConfig> {
        let mut cfg = OptimizerConfig::new(method, eta, privacy, self.noise(privacy.batch_size)?)?;
        cfg.schedule = self.schedule;
        cfg.sampling = self.sampling;
        cfg.adam = self.adam;
        cfg.validate()?;
        Ok(cfg)
    }
}
