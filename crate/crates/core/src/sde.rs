//! SDE models of the private optimizers and an Euler–Maruyama integrator.
//!
//! Diffusions are applied matrix-free. Every model's covariance is either a
//! scalar multiple of the identity, diagonal, or isotropic plus rank one, so
//! square roots are available in closed form.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{check_dim, invalid, Result};
use crate::noise::{sample_per_example_noise_into, NoiseSpec};
use crate::objectives::Objective;
use crate::optimizers::{Method, RecordOptions, DIVERGENCE_THRESHOLD};
use crate::privacy::PrivacyParams;
use crate::record::{RunRecord, Source};
use crate::vecops::{dot, fill_normal, norm, norm_sq};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeLabel {
    SgdP1,
    SgdP2,
    SignP1,
    SignP2Exact,
    SignP2Linear,
    SgdMixed,
    SignMixed,
}

impl SdeLabel {
    pub fn name(self) -> &'static str {
        match self {
            SdeLabel::SgdP1 => "sgd_p1",
            SdeLabel::SgdP2 => "sgd_p2",
            SdeLabel::SignP1 => "sign_p1",
            SdeLabel::SignP2Exact => "sign_p2_exact",
            SdeLabel::SignP2Linear => "sign_p2_linear",
            SdeLabel::SgdMixed => "sgd_mixed",
            SdeLabel::SignMixed => "sign_mixed",
        }
    }
}

/// Covariance of the diffusion at one point.
#[derive(Debug, Clone, PartialEq)]
pub enum CovForm {
    /// `s·I`.
    Scalar(f64),
    Diag(Vec<f64>),
    /// `a·I + ρ·uuᵀ` with `u` a unit vector (or zero).
    IsoRankOne { a: f64, rho: f64, u: Vec<f64> },
}

impl CovForm {
    pub fn diag(&self, d: usize) -> Vec<f64> {
        match self {
            CovForm::Scalar(s) => vec![*s; d],
            CovForm::Diag(v) => v.clone(),
            CovForm::IsoRankOne { a, rho, u } => u.iter().map(|ui| a + rho * ui * ui).collect(),
        }
    }

    pub fn trace(&self, d: usize) -> f64 {
        match self {
            CovForm::Scalar(s) => s * d as f64,
            CovForm::Diag(v) => v.iter().sum(),
            CovForm::IsoRankOne { a, rho, u } => a * d as f64 + rho * norm_sq(u),
        }
    }

    /// `out = Σ^{1/2} ξ`.
    pub fn apply_sqrt(&self, xi: &[f64], out: &mut [f64]) {
        match self {
            CovForm::Scalar(s) => {
                let r = s.max(0.0).sqrt();
                for (o, z) in out.iter_mut().zip(xi) {
                    *o = r * z;
                }
            }
            CovForm::Diag(v) => {
                for ((o, z), s) in out.iter_mut().zip(xi).zip(v) {
                    *o = s.max(0.0).sqrt() * z;
                }
            }
            CovForm::IsoRankOne { a, rho, u } => {
                let ra = a.max(0.0).sqrt();
                let corr = (a + rho).max(0.0).sqrt() - ra;
                let proj = corr * dot(u, xi);
                for ((o, z), ui) in out.iter_mut().zip(xi).zip(u) {
                    *o = ra * z + proj * ui;
                }
            }
        }
    }

    /// `p·first + (1−p)·second`.
    pub fn mix(p: f64, first: &CovForm, second: &CovForm, d: usize) -> CovForm {
        let q = 1.0 - p;
        match (first, second) {
            (CovForm::Scalar(a), CovForm::Scalar(b)) => CovForm::Scalar(p * a + q * b),
            (CovForm::IsoRankOne { a, rho, u }, CovForm::Scalar(s)) => CovForm::IsoRankOne {
                a: p * a + q * s,
                rho: p * rho,
                u: u.clone(),
            },
            (CovForm::Scalar(s), CovForm::IsoRankOne { a, rho, u }) => CovForm::IsoRankOne {
                a: p * s + q * a,
                rho: q * rho,
                u: u.clone(),
            },
            _ => {
                let a = first.diag(d);
                let b = second.diag(d);
                CovForm::Diag(a.iter().zip(&b).map(|(x, y)| p * x + q * y).collect())
            }
        }
    }
}

/// Settings for the plug-in estimate of `E[uuᵀ]`, `u = ∇f_ξ/‖∇f_ξ‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase1Options {
    pub samples: usize,
    pub diag_only: bool,
}

impl Default for Phase1Options {
    fn default() -> Self {
        Self {
            samples: 64,
            diag_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SgdPhase1 {
    a1: f64,
    c2_over_b: f64,
    dp_var: f64,
    rank_one_scale: f64,
    noise: NoiseSpec,
    opts: Phase1Options,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    SgdP2 { var: f64 },
    SgdP1(SgdPhase1),
    SignP1 { a: f64 },
    SignP2 { s: f64, exact: bool },
    Mixed { p: f64, first: Box<Kind>, second: Box<Kind> },
}

#[derive(Debug, Default)]
struct ClampLog {
    count: AtomicU64,
    warned: AtomicBool,
}

/// Drift and diffusion of one optimizer/phase pair on a fixed objective.
#[derive(Debug, Clone)]
pub struct SdeModel {
    pub label: SdeLabel,
    pub eta: f64,
    obj: Arc<Objective>,
    kind: Kind,
    clamps: Arc<ClampLog>,
}

fn check_batches(noise: &NoiseSpec, privacy: &PrivacyParams) -> Result<f64> {
    if noise.batch_size != privacy.batch_size {
        return Err(invalid("noise and privacy batch sizes differ"));
    }
    Ok(privacy.batch_size as f64)
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!("eta must be > 0, got {eta}")));
    }
    Ok(())
}

fn sgd_p2_var(noise: &NoiseSpec, privacy: &PrivacyParams, b: f64) -> f64 {
    let c = privacy.clip;
    noise.sigma_gamma.powi(2) / b + c * c * privacy.sigma_dp.powi(2) / (b * b)
}

fn sgd_p1_kind(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, b: f64, opts: Phase1Options) -> Result<SgdPhase1> {
    if !(noise.sigma_gamma > 0.0) {
        return Err(invalid("phase-1 SGD model needs sigma_gamma > 0"));
    }
    if opts.samples == 0 {
        return Err(invalid("phase-1 SGD model needs at least one sample"));
    }
    let d = obj.dim() as f64;
    let k = noise.k();
    let c = privacy.clip;
    Ok(SgdPhase1 {
        a1: c * k / (noise.sigma_gamma * d.sqrt()),
        c2_over_b: c * c / b,
        dp_var: c * c * privacy.sigma_dp.powi(2) / (b * b),
        rank_one_scale: k * k / (noise.sigma_gamma.powi(2) * d),
        noise: *noise,
        opts,
    })
}

fn sign_p1_coef(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, b: f64) -> Result<f64> {
    if !(privacy.sigma_dp > 0.0) || !(noise.sigma_gamma > 0.0) {
        return Err(invalid("phase-1 sign model needs sigma_dp > 0 and sigma_gamma > 0"));
    }
    let d = obj.dim() as f64;
    Ok((2.0 / (d * std::f64::consts::PI)).sqrt() * b * noise.k() / (privacy.sigma_dp * noise.sigma_gamma))
}

fn sign_p2_scale(noise: &NoiseSpec, privacy: &PrivacyParams, b: f64) -> Result<f64> {
    let var = sgd_p2_var(noise, privacy, b);
    if !(var > 0.0) {
        return Err(invalid("phase-2 sign model needs positive total noise"));
    }
    Ok(var.sqrt())
}

impl SdeModel {
    fn make(label: SdeLabel, eta: f64, obj: &Objective, kind: Kind) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self {
            label,
            eta,
            obj: Arc::new(obj.clone()),
            kind,
            clamps: Arc::new(ClampLog::default()),
        })
    }

    /// `dX = −∇f dt + √η·√(σ_γ²/B + C²σ_DP²/B²) dW`.
    pub fn sgd_phase2(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, eta: f64) -> Result<Self> {
        let b = check_batches(noise, privacy)?;
        Self::make(SdeLabel::SgdP2, eta, obj, Kind::SgdP2 { var: sgd_p2_var(noise, privacy, b) })
    }

    pub fn sgd_phase1(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, eta: f64) -> Result<Self> {
        Self::sgd_phase1_with(obj, noise, privacy, eta, Phase1Options::default())
    }

    pub fn sgd_phase1_with(
        obj: &Objective,
        noise: &NoiseSpec,
        privacy: &PrivacyParams,
        eta: f64,
        opts: Phase1Options,
    ) -> Result<Self> {
        let b = check_batches(noise, privacy)?;
        let p1 = sgd_p1_kind(obj, noise, privacy, b, opts)?;
        Self::make(SdeLabel::SgdP1, eta, obj, Kind::SgdP1(p1))
    }

    /// Erf drift when `exact`, otherwise the linearization `−√(2/π)∇f/s`.
    pub fn sign_phase2(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, eta: f64, exact: bool) -> Result<Self> {
        let b = check_batches(noise, privacy)?;
        let s = sign_p2_scale(noise, privacy, b)?;
        let label = if exact { SdeLabel::SignP2Exact } else { SdeLabel::SignP2Linear };
        Self::make(label, eta, obj, Kind::SignP2 { s, exact })
    }

    pub fn sign_phase1(obj: &Objective, noise: &NoiseSpec, privacy: &PrivacyParams, eta: f64) -> Result<Self> {
        let b = check_batches(noise, privacy)?;
        let a = sign_p1_coef(obj, noise, privacy, b)?;
        Self::make(SdeLabel::SignP1, eta, obj, Kind::SignP1 { a })
    }

    /// Convex combination of the phase-1 and phase-2 models with clip
    /// fraction `p`. DP-SignSGD mixes with the linearized phase-2 model.
    pub fn mixed(
        obj: &Objective,
        noise: &NoiseSpec,
        privacy: &PrivacyParams,
        eta: f64,
        p: f64,
        method: Method,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("clip fraction must lie in [0,1], got {p}")));
        }
        let b = check_batches(noise, privacy)?;
        let (label, first, second) = match method {
            Method::DpSgd => (
                SdeLabel::SgdMixed,
                Kind::SgdP1(sgd_p1_kind(obj, noise, privacy, b, Phase1Options::default())?),
                Kind::SgdP2 { var: sgd_p2_var(noise, privacy, b) },
            ),
            Method::DpSignSgd => (
                SdeLabel::SignMixed,
                Kind::SignP1 { a: sign_p1_coef(obj, noise, privacy, b)? },
                Kind::SignP2 {
                    s: sign_p2_scale(noise, privacy, b)?,
                    exact: false,
                },
            ),
            Method::DpAdam => return Err(invalid("no SDE model for DP-Adam")),
        };
        Self::make(
            label,
            eta,
            obj,
            Kind::Mixed {
                p,
                first: Box::new(first),
                second: Box::new(second),
            },
        )
    }

    pub fn objective(&self) -> &Objective {
        &self.obj
    }

    pub fn dim(&self) -> usize {
        self.obj.dim()
    }

    /// Number of times the phase-1 SGD covariance had to be clamped to PSD.
    pub fn clamp_count(&self) -> u64 {
        self.clamps.count.load(Ordering::Relaxed)
    }

    /// Scalar `c` with drift `−c∇f` for the linear-drift models.
    pub fn drift_scale(&self) -> Option<f64> {
        fn scale(k: &Kind) -> Option<f64> {
            match k {
                Kind::SgdP2 { .. } => Some(1.0),
                Kind::SgdP1(p1) => Some(p1.a1),
                Kind::SignP1 { a } => Some(*a),
                Kind::SignP2 { s, exact: false } => Some(SQRT_2_OVER_PI / s),
                Kind::SignP2 { exact: true, .. } => None,
                Kind::Mixed { p, first, second } => Some(p * scale(first)? + (1.0 - p) * scale(second)?),
            }
        }
        scale(&self.kind)
    }

    fn drift_kind(kind: &Kind, g: &[f64], out: &mut [f64]) {
        match kind {
            Kind::SgdP2 { .. } => {
                for (o, gi) in out.iter_mut().zip(g) {
                    *o = -gi;
                }
            }
            Kind::SgdP1(p1) => {
                for (o, gi) in out.iter_mut().zip(g) {
                    *o = -p1.a1 * gi;
                }
            }
            Kind::SignP1 { a } => {
                for (o, gi) in out.iter_mut().zip(g) {
                    *o = -a * gi;
                }
            }
            Kind::SignP2 { s, exact } => {
                if *exact {
                    let denom = std::f64::consts::SQRT_2 * s;
                    for (o, gi) in out.iter_mut().zip(g) {
                        *o = -erf(gi / denom);
                    }
                } else {
                    let c = SQRT_2_OVER_PI / s;
                    for (o, gi) in out.iter_mut().zip(g) {
                        *o = -c * gi;
                    }
                }
            }
            Kind::Mixed { p, first, second } => {
                let mut tmp = vec![0.0; out.len()];
                Self::drift_kind(first, g, out);
                Self::drift_kind(second, g, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o = p * *o + (1.0 - p) * t;
                }
            }
        }
    }

    fn sgd_p1_cov<R: Rng + ?Sized>(&self, p1: &SgdPhase1, g: &[f64], rng: &mut R) -> CovForm {
        let d = g.len();
        let gn = norm(g);
        let (alpha, beta, u) = if d == 1 {
            (0.0, 1.0, vec![1.0])
        } else if gn == 0.0 {
            (1.0 / d as f64, 0.0, vec![0.0; d])
        } else {
            let u: Vec<f64> = g.iter().map(|v| v / gn).collect();
            let mut z = vec![0.0; d];
            let mut s_par = 0.0;
            for _ in 0..p1.opts.samples {
                sample_per_example_noise_into(&p1.noise, rng, &mut z);
                let mut nsq = 0.0;
                let mut proj = 0.0;
                for ((zi, gi), ui) in z.iter().zip(g).zip(&u) {
                    let w = gi + zi;
                    nsq += w * w;
                    proj += w * ui;
                }
                if nsq > 0.0 {
                    s_par += proj * proj / nsq;
                }
            }
            s_par /= p1.opts.samples as f64;
            let alpha = (1.0 - s_par) / (d as f64 - 1.0);
            (alpha, s_par - alpha, u)
        };
        let a = p1.c2_over_b * alpha + p1.dp_var;
        let mut rho = p1.c2_over_b * (beta - p1.rank_one_scale * gn * gn);
        if a + rho < 0.0 {
            rho = -a;
            self.clamps.count.fetch_add(1, Ordering::Relaxed);
            if !self.clamps.warned.swap(true, Ordering::Relaxed) {
                log::warn!("phase-1 SGD covariance estimate was indefinite; clamped to PSD");
            }
        }
        if p1.opts.diag_only {
            CovForm::Diag(u.iter().map(|ui| a + rho * ui * ui).collect())
        } else {
            CovForm::IsoRankOne { a, rho, u }
        }
    }

    fn cov_kind<R: Rng + ?Sized>(&self, kind: &Kind, g: &[f64], rng: &mut R) -> CovForm {
        match kind {
            Kind::SgdP2 { var } => CovForm::Scalar(*var),
            Kind::SgdP1(p1) => self.sgd_p1_cov(p1, g, rng),
            Kind::SignP1 { a } => CovForm::Diag(
                g.iter()
                    .map(|gi| {
                        let m = (a * gi).clamp(-1.0, 1.0);
                        1.0 - m * m
                    })
                    .collect(),
            ),
            Kind::SignP2 { s, .. } => {
                let denom = std::f64::consts::SQRT_2 * s;
                CovForm::Diag(
                    g.iter()
                        .map(|gi| {
                            let m = erf(gi / denom);
                            1.0 - m * m
                        })
                        .collect(),
                )
            }
            Kind::Mixed { p, first, second } => {
                let a = self.cov_kind(first, g, rng);
                let b = self.cov_kind(second, g, rng);
                CovForm::mix(*p, &a, &b, g.len())
            }
        }
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.obj.gradient(x)?;
        let mut out = vec![0.0; g.len()];
        Self::drift_kind(&self.kind, &g, &mut out);
        Ok(out)
    }

    /// Diffusion covariance `Σ̄(x)` (without the `η` factor).
    pub fn covariance<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<CovForm> {
        let g = self.obj.gradient(x)?;
        Ok(self.cov_kind(&self.kind, &g, rng))
    }

    pub fn diffusion_diag<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.covariance(x, rng)?.diag(self.dim()))
    }

    pub fn diffusion_trace<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64> {
        Ok(self.covariance(x, rng)?.trace(self.dim()))
    }

    /// `Σ̄(x)^{1/2} ξ`.
    pub fn apply_diffusion_sqrt<R: Rng + ?Sized>(&self, x: &[f64], xi: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_dim(self.dim(), xi.len())?;
        let cov = self.covariance(x, rng)?;
        let mut out = vec![0.0; xi.len()];
        cov.apply_sqrt(xi, &mut out);
        Ok(out)
    }
}

/// `x_{j+1} = x_j + b(x_j)Δt + √η·Σ̄(x_j)^{1/2} ξ_j·√Δt`.
pub fn euler_maruyama<R: Rng + ?Sized>(
    model: &SdeModel,
    x0: &[f64],
    dt: f64,
    steps: u64,
    opts: RecordOptions,
    rng: &mut R,
) -> Result<RunRecord> {
    check_dim(model.dim(), x0.len())?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid(format!("dt must be > 0, got {dt}")));
    }
    if opts.record_every == 0 {
        return Err(invalid("record_every must be >= 1"));
    }
    let d = model.dim();
    let obj = &*model.obj;
    let noise_scale = (model.eta * dt).sqrt();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut kick = vec![0.0; d];

    let mut rec = RunRecord::new(model.label.name(), Source::Sde, 0, model.eta);
    rec.config = serde_json::json!({ "model": model.label, "eta": model.eta, "dt": dt, "steps": steps });

    let push = |x: &[f64], g: &[f64], rec: &mut RunRecord, k: u64| -> bool {
        let f = obj.value_unchecked(x);
        rec.steps.push(k);
        rec.loss.push(f);
        rec.grad_norm_sq.push(norm_sq(g));
        if opts.snapshots {
            rec.snapshots.push(x.to_vec());
        }
        !f.is_finite() || f.abs() > DIVERGENCE_THRESHOLD
    };

    obj.gradient_unchecked(&x, &mut g);
    if push(&x, &g, &mut rec, 0) {
        rec.diverged = true;
        return Ok(rec);
    }
    for k in 1..=steps {
        SdeModel::drift_kind(&model.kind, &g, &mut drift);
        let cov = model.cov_kind(&model.kind, &g, rng);
        fill_normal(rng, &mut xi);
        cov.apply_sqrt(&xi, &mut kick);
        for i in 0..d {
            x[i] += drift[i] * dt + noise_scale * kick[i];
        }
        obj.gradient_unchecked(&x, &mut g);
        if (k % opts.record_every == 0 || k == steps) && push(&x, &g, &mut rec, k) {
            rec.diverged = true;
            break;
        }
    }
    Ok(rec)
}
