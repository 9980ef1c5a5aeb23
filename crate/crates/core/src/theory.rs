//! Closed-form bounds, stationary moments and optimal learning rates.
//!
//! All bounds carry their explicit constants. `ln` is the natural log.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::noise::{k_of_nu, Nu};
use crate::optimizers::Method;
use crate::privacy::{epsilon_star, phi};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl TryFrom<u8> for Phase {
    type Error = crate::error::Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Phase::One),
            2 => Ok(Phase::Two),
            other => Err(invalid(format!("phase must be 1 or 2, got {other}"))),
        }
    }
}

/// Every symbol entering the bounds. `sigma_dp` is stored explicitly so that
/// configurations given by noise multiplier are representable; use
/// [`BoundInputs::calibrated`] to derive it from `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub f0: f64,
    pub mu: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub d: usize,
    pub eta: f64,
    #[serde(rename = "T")]
    pub steps: u64,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub n: usize,
    #[serde(rename = "C")]
    pub clip: f64,
    pub sigma_gamma: f64,
    pub nu: Nu,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub sigma_dp: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.steps == 0 || self.batch_size == 0 || self.n == 0 {
            return Err(invalid("d, T, B and n must be >= 1"));
        }
        if self.batch_size > self.n {
            return Err(invalid("B must not exceed n"));
        }
        if !(self.eta > 0.0) || !(self.clip > 0.0) || !(self.l > 0.0) {
            return Err(invalid("eta, C and L must be > 0"));
        }
        if !(self.f0 >= 0.0) || !(self.mu >= 0.0) || !(self.sigma_gamma >= 0.0) || !(self.sigma_dp >= 0.0) {
            return Err(invalid("f0, mu, sigma_gamma and sigma_dp must be >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0,1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be > 0"));
        }
        Ok(())
    }

    /// Sets `σ_DP = √T·Φ/ε` (0 when `ε = ∞`).
    pub fn calibrated(mut self) -> Result<Self> {
        self.validate()?;
        self.sigma_dp = if self.epsilon.is_infinite() {
            0.0
        } else {
            (self.steps as f64).sqrt() * self.phi() / self.epsilon
        };
        Ok(self)
    }

    pub fn q(&self) -> f64 {
        self.batch_size as f64 / self.n as f64
    }

    pub fn phi(&self) -> f64 {
        phi(self.q(), self.delta)
    }

    pub fn ln_inv_delta(&self) -> f64 {
        (1.0 / self.delta).ln()
    }

    pub fn tau(&self) -> f64 {
        self.eta * self.steps as f64
    }

    pub fn k(&self) -> f64 {
        k_of_nu(self.nu).unwrap_or(1.0)
    }

    fn b(&self) -> f64 {
        self.batch_size as f64
    }

    fn df(&self) -> f64 {
        self.d as f64
    }

    /// Phase-2 per-coordinate gradient noise variance `σ_γ²/B + C²σ_DP²/B²`.
    pub fn noise_var(&self) -> f64 {
        let b = self.b();
        self.sigma_gamma.powi(2) / b + (self.clip * self.sigma_dp / b).powi(2)
    }

    fn need_mu(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(invalid("loss bounds need mu > 0"));
        }
        Ok(())
    }
}

/// `f(t) = f₀·e^{−rate·t} + (1 − e^{−rate·t})·asymptote`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBound {
    pub rate: f64,
    pub asymptote: f64,
}

impl LossBound {
    pub fn at(&self, f0: f64, t: f64) -> f64 {
        let decay = (-self.rate * t).exp();
        f0 * decay + (1.0 - decay) * self.asymptote
    }
}

pub fn lossbound_sgd_terms(inp: &BoundInputs, phase: Phase) -> Result<LossBound> {
    inp.validate()?;
    inp.need_mu()?;
    let (d, b, c, l, mu, eta) = (inp.df(), inp.b(), inp.clip, inp.l, inp.mu, inp.eta);
    let dp = (c * inp.sigma_dp / b).powi(2);
    match phase {
        Phase::One => {
            if !(inp.sigma_gamma > 0.0) {
                return Err(invalid("phase-1 bound needs sigma_gamma > 0"));
            }
            let k = inp.k();
            let sg = inp.sigma_gamma;
            Ok(LossBound {
                rate: 2.0 * mu * k * c / (sg * d.sqrt()),
                asymptote: eta * d.powf(1.5) * l * sg / (4.0 * mu * c * k) * (c * c / (b * d) + dp),
            })
        }
        Phase::Two => Ok(LossBound {
            rate: 2.0 * mu,
            asymptote: eta * d * l / (4.0 * mu) * inp.noise_var(),
        }),
    }
}

pub fn lossbound_sgd(inp: &BoundInputs, t: f64, phase: Phase) -> Result<f64> {
    Ok(lossbound_sgd_terms(inp, phase)?.at(inp.f0, t))
}

pub fn lossbound_sign_terms(inp: &BoundInputs, phase: Phase) -> Result<LossBound> {
    inp.validate()?;
    inp.need_mu()?;
    let (d, b, l, mu, eta) = (inp.df(), inp.b(), inp.l, inp.mu, inp.eta);
    match phase {
        Phase::One => {
            if !(inp.sigma_gamma > 0.0) || !(inp.sigma_dp > 0.0) {
                return Err(invalid("phase-1 sign bound needs sigma_gamma > 0 and sigma_dp > 0"));
            }
            let a = (2.0 / (d * std::f64::consts::PI)).sqrt() * b * inp.k() / (inp.sigma_dp * inp.sigma_gamma);
            Ok(LossBound {
                rate: 2.0 * mu * a,
                asymptote: eta * d * l / (4.0 * mu * a),
            })
        }
        Phase::Two => {
            let s = inp.noise_var().sqrt();
            if !(s > 0.0) {
                return Err(invalid("phase-2 sign bound needs positive total noise"));
            }
            Ok(LossBound {
                rate: 2.0 * mu * SQRT_2_OVER_PI / s,
                asymptote: eta * d * l / (4.0 * mu) * s / SQRT_2_OVER_PI,
            })
        }
    }
}

pub fn lossbound_sign(inp: &BoundInputs, t: f64, phase: Phase) -> Result<f64> {
    Ok(lossbound_sign_terms(inp, phase)?.at(inp.f0, t))
}

pub fn k1(inp: &BoundInputs) -> f64 {
    (inp.sigma_gamma * inp.df().sqrt() / (inp.clip * inp.k())).max(1.0)
}

pub fn k2(inp: &BoundInputs) -> f64 {
    let b = inp.b();
    (inp.clip * inp.clip / (b * inp.df())).max(inp.sigma_gamma.powi(2) / b)
}

pub fn k3(inp: &BoundInputs) -> f64 {
    let (b, q, sl) = (inp.b(), inp.q(), inp.ln_inv_delta().sqrt());
    let pi = std::f64::consts::PI;
    let first = (inp.df() * pi / 2.0).sqrt() * inp.sigma_gamma * q * sl / (b * inp.k());
    let eps2 = if inp.epsilon.is_infinite() { f64::INFINITY } else { inp.epsilon.powi(2) };
    let inner = eps2 * inp.sigma_gamma.powi(2) / (b * inp.steps as f64) + (inp.clip * q * sl / b).powi(2);
    first.max((pi / 2.0).sqrt() * inner.sqrt())
}

pub fn k4(inp: &BoundInputs) -> f64 {
    let (b, q, sl) = (inp.b(), inp.q(), inp.ln_inv_delta().sqrt());
    let pi = std::f64::consts::PI;
    let first = (pi * inp.df() / 2.0).sqrt() * inp.sigma_gamma * q * sl / (b * inp.k());
    first.max((pi / 2.0).sqrt() * inp.clip * q * sl / b)
}

pub fn gradbound_sgd(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let (d, b, t) = (inp.df(), inp.b(), inp.steps as f64);
    let privacy = if inp.epsilon.is_infinite() {
        0.0
    } else {
        inp.clip.powi(2) * (inp.q() / b).powi(2) * t * inp.ln_inv_delta() / inp.epsilon.powi(2)
    };
    Ok(k1(inp) * (inp.f0 / (inp.eta * t) + inp.eta * d * inp.l / 2.0 * (k2(inp) + privacy)))
}

fn sign_core(inp: &BoundInputs) -> f64 {
    let st = (inp.steps as f64).sqrt();
    (inp.f0 / (inp.eta * st) + inp.eta * inp.df() * inp.l * st / 2.0) / inp.epsilon
}

pub fn gradbound_sign(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    Ok(k3(inp) * sign_core(inp))
}

pub fn gradbound_sign_mixed(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    Ok(k4(inp) * sign_core(inp))
}

/// Per-mode mean and variance of the iterates on `½xᵀdiag(h)x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_stationary(h: &[f64], x0: &[f64]) -> Result<()> {
    crate::error::check_dim(h.len(), x0.len())?;
    if h.iter().any(|&l| !(l > 0.0)) {
        return Err(invalid("stationary moments need every eigenvalue > 0"));
    }
    Ok(())
}

/// DP-SGD: mean `x₀e^{−λt}`, variance `(η/2λ)·s²·(1 − e^{−2λt})`.
pub fn stationary_sgd(h: &[f64], x0: &[f64], inp: &BoundInputs, t: f64) -> Result<StationaryMoments> {
    check_stationary(h, x0)?;
    let s2 = inp.noise_var();
    let eta = inp.eta;
    Ok(StationaryMoments {
        mean: h.iter().zip(x0).map(|(l, x)| x * (-l * t).exp()).collect(),
        var: h
            .iter()
            .map(|l| eta / (2.0 * l) * s2 * -(-2.0 * l * t).exp_m1())
            .collect(),
    })
}

/// DP-SignSGD with `K = √(2/π)/s`.
pub fn stationary_sign(h: &[f64], x0: &[f64], inp: &BoundInputs, t: f64) -> Result<StationaryMoments> {
    check_stationary(h, x0)?;
    let s = inp.noise_var().sqrt();
    if !(s > 0.0) {
        return Err(invalid("stationary sign moments need positive total noise"));
    }
    let k = SQRT_2_OVER_PI / s;
    let eta = inp.eta;
    let mut mean = Vec::with_capacity(h.len());
    let mut var = Vec::with_capacity(h.len());
    for (&l, &x) in h.iter().zip(x0) {
        let kl = k * l;
        mean.push(x * (-kl * t).exp());
        let r = 2.0 * kl + eta * kl * kl;
        let transient = x * x * (-2.0 * kl * t).exp() * (-eta * kl * kl * t).exp_m1();
        var.push(transient + eta / r * -(-r * t).exp_m1());
    }
    Ok(StationaryMoments { mean, var })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrBranch {
    BatchNoise,
    Privacy,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalLr {
    pub eta: f64,
    pub active: LrBranch,
    pub batch_noise_branch: f64,
    pub privacy_branch: f64,
}

/// `min{√(f₀/(dLTσ_γ²)), √(f₀/(dL))·εn/(CT)}`; both branches are reported.
pub fn optimal_lr_sgd(inp: &BoundInputs) -> Result<OptimalLr> {
    inp.validate()?;
    let (d, t) = (inp.df(), inp.steps as f64);
    let batch = (inp.f0 / (d * inp.l * t * inp.sigma_gamma.powi(2))).sqrt();
    let privacy = (inp.f0 / (d * inp.l)).sqrt() * inp.epsilon * inp.n as f64 / (inp.clip * t);
    let (eta, active) = if privacy < batch {
        (privacy, LrBranch::Privacy)
    } else {
        (batch, LrBranch::BatchNoise)
    };
    Ok(OptimalLr {
        eta,
        active,
        batch_noise_branch: batch,
        privacy_branch: privacy,
    })
}

/// `√(f₀/(dLT))`.
pub fn optimal_lr_sign(inp: &BoundInputs) -> Result<OptimalLr> {
    inp.validate()?;
    let eta = (inp.f0 / (inp.df() * inp.l * inp.steps as f64)).sqrt();
    Ok(OptimalLr {
        eta,
        active: LrBranch::Single,
        batch_noise_branch: eta,
        privacy_branch: eta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum UtilityComparison {
    SignAlways,
    SgdAbove { epsilon_star: f64 },
}

impl UtilityComparison {
    /// The method with the smaller phase-2 privacy-utility term at `epsilon`.
    pub fn preferred(&self, epsilon: f64) -> Method {
        match self {
            UtilityComparison::SignAlways => Method::DpSignSgd,
            UtilityComparison::SgdAbove { epsilon_star } => {
                if epsilon > *epsilon_star {
                    Method::DpSgd
                } else {
                    Method::DpSignSgd
                }
            }
        }
    }
}

/// Phase-2 asymptotes with problem-independent constants dropped:
/// `(ηdL/μ)·S` for DP-SGD and `(ηdL/μ)·√S` for DP-SignSGD, where
/// `S = σ_γ²/B + C²Φ²T/(B²ε²)`.
pub fn phase2_tradeoff_terms(inp: &BoundInputs) -> Result<(f64, f64)> {
    inp.validate()?;
    inp.need_mu()?;
    let b = inp.b();
    let dp = if inp.epsilon.is_infinite() {
        0.0
    } else {
        (inp.clip * inp.phi() / (b * inp.epsilon)).powi(2) * inp.steps as f64
    };
    let s = inp.sigma_gamma.powi(2) / b + dp;
    let pre = inp.eta * inp.df() * inp.l / inp.mu;
    Ok((pre * s, pre * s.sqrt()))
}

pub fn compare_utility(inp: &BoundInputs) -> Result<UtilityComparison> {
    inp.validate()?;
    let es = epsilon_star(inp.clip, inp.steps, inp.batch_size, inp.n, inp.sigma_gamma, inp.delta)?;
    if es.is_infinite() {
        Ok(UtilityComparison::SignAlways)
    } else {
        Ok(UtilityComparison::SgdAbove { epsilon_star: es })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBounds {
    pub phase1: Option<LossBound>,
    pub phase2: Option<LossBound>,
    pub phase1_at_t: Option<f64>,
    pub phase2_at_t: Option<f64>,
}

/// Every formula evaluated at one input set, with intermediate constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub inputs: BoundInputs,
    pub t: f64,
    pub q: f64,
    pub phi: f64,
    pub sigma_dp: f64,
    pub tau: f64,
    pub k_nu: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub loss_sgd: PhaseBounds,
    pub loss_sign: PhaseBounds,
    pub gradbound_sgd: f64,
    pub gradbound_sign: f64,
    pub gradbound_sign_mixed: f64,
    pub optimal_lr_sgd: OptimalLr,
    pub optimal_lr_sign: OptimalLr,
    pub comparison: UtilityComparison,
}

fn phase_bounds(f0: f64, t: f64, p1: Result<LossBound>, p2: Result<LossBound>) -> PhaseBounds {
    let p1 = p1.ok();
    let p2 = p2.ok();
    PhaseBounds {
        phase1_at_t: p1.map(|b| b.at(f0, t)),
        phase2_at_t: p2.map(|b| b.at(f0, t)),
        phase1: p1,
        phase2: p2,
    }
}

pub fn report(inp: &BoundInputs, t: f64) -> Result<TheoryReport> {
    inp.validate()?;
    Ok(TheoryReport {
        inputs: *inp,
        t,
        q: inp.q(),
        phi: inp.phi(),
        sigma_dp: inp.sigma_dp,
        tau: inp.tau(),
        k_nu: inp.k(),
        k1: k1(inp),
        k2: k2(inp),
        k3: k3(inp),
        k4: k4(inp),
        loss_sgd: phase_bounds(inp.f0, t, lossbound_sgd_terms(inp, Phase::One), lossbound_sgd_terms(inp, Phase::Two)),
        loss_sign: phase_bounds(inp.f0, t, lossbound_sign_terms(inp, Phase::One), lossbound_sign_terms(inp, Phase::Two)),
        gradbound_sgd: gradbound_sgd(inp)?,
        gradbound_sign: gradbound_sign(inp)?,
        gradbound_sign_mixed: gradbound_sign_mixed(inp)?,
        optimal_lr_sgd: optimal_lr_sgd(inp)?,
        optimal_lr_sign: optimal_lr_sign(inp)?,
        comparison: compare_utility(inp)?,
    })
}
