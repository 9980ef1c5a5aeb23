//! Clipping, the Gaussian mechanism and privacy calibration.
//!
//! Two calibration modes are offered. `Analytic` uses `σ_DP = √T·Φ/ε` with
//! `Φ = q·√(ln(1/δ))`. `Rdp` runs a subsampled-Gaussian Rényi accountant over
//! integer orders 2..=256 and converts with `ε = min_α [T·RDP(α) + ln(1/δ)/(α−1)]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};
use crate::vecops::norm;

pub const RDP_ORDERS: std::ops::RangeInclusive<u32> = 2..=256;

/// `min(C/‖x‖, 1)·x`. Returns the scale that was applied.
pub fn clip_in_place(x: &mut [f64], c: f64) -> f64 {
    let n = norm(x);
    if n > c {
        let s = c / n;
        x.iter_mut().for_each(|v| *v *= s);
        s
    } else {
        1.0
    }
}

pub fn clip(x: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(invalid(format!("clip threshold must be > 0, got {c}")));
    }
    let mut out = x.to_vec();
    clip_in_place(&mut out, c);
    Ok(out)
}

/// `clipped_sum/B + N(0, (Cσ_DP/B)² I)`.
pub fn privatize<R: Rng + ?Sized>(
    clipped_sum: &[f64],
    batch_size: usize,
    c: f64,
    sigma_dp: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    if !(sigma_dp >= 0.0) {
        return Err(invalid(format!("sigma_dp must be >= 0, got {sigma_dp}")));
    }
    let b = batch_size as f64;
    let scale = c * sigma_dp / b;
    Ok(clipped_sum
        .iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v / b + scale * z
        })
        .collect())
}

/// `Φ = q·√(ln(1/δ))`.
pub fn phi(q: f64, delta: f64) -> f64 {
    q * (1.0 / delta).ln().sqrt()
}

fn check_common(delta: f64, q: f64, steps: u64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("q must lie in (0,1], got {q}")));
    }
    if steps == 0 {
        return Err(invalid("T must be >= 1"));
    }
    Ok(())
}

/// `σ_DP = q·√(T·ln(1/δ))/ε`.
pub fn calibrate_sigma_analytic(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    check_common(delta, q, steps)?;
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok((steps as f64).sqrt() * phi(q, delta) / epsilon)
}

/// Inverse of [`calibrate_sigma_analytic`]; `σ_DP = 0` maps to `∞`.
pub fn epsilon_of_sigma_analytic(sigma_dp: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    check_common(delta, q, steps)?;
    if !(sigma_dp >= 0.0) {
        return Err(invalid(format!("sigma_dp must be >= 0, got {sigma_dp}")));
    }
    if sigma_dp == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((steps as f64).sqrt() * phi(q, delta) / sigma_dp)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of one subsampled-Gaussian step at integer order `α`:
/// `ln(Σ_k C(α,k)(1−q)^{α−k} q^k exp((k²−k)/(2σ²)))/(α−1)`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let a = alpha as f64;
    let ln_q = q.ln();
    let ln_1mq = if q < 1.0 { (-q).ln_1p() } else { f64::NEG_INFINITY };
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let rest = a - kf;
        let tail = if rest == 0.0 { 0.0 } else { rest * ln_1mq };
        let head = if k == 0 { 0.0 } else { kf * ln_q };
        let binom = ln_gamma(a + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(rest + 1.0);
        let term = binom + head + tail + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc / (a - 1.0)
}

/// Result of the Rényi accountant: ε and the minimizing order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpEpsilon {
    pub epsilon: f64,
    pub order: u32,
}

pub fn rdp_epsilon(sigma_dp: f64, delta: f64, q: f64, steps: u64) -> Result<RdpEpsilon> {
    check_common(delta, q, steps)?;
    if !(sigma_dp >= 0.0) {
        return Err(invalid(format!("sigma_dp must be >= 0, got {sigma_dp}")));
    }
    if sigma_dp == 0.0 {
        return Ok(RdpEpsilon {
            epsilon: f64::INFINITY,
            order: *RDP_ORDERS.start(),
        });
    }
    let ln_inv_delta = (1.0 / delta).ln();
    let t = steps as f64;
    let mut best = RdpEpsilon {
        epsilon: f64::INFINITY,
        order: *RDP_ORDERS.start(),
    };
    for alpha in RDP_ORDERS {
        let eps = t * rdp_subsampled_gaussian(q, sigma_dp, alpha) + ln_inv_delta / (alpha as f64 - 1.0);
        if eps < best.epsilon {
            best = RdpEpsilon { epsilon: eps, order: alpha };
        }
    }
    Ok(best)
}

pub fn epsilon_of_sigma_rdp(sigma_dp: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    Ok(rdp_epsilon(sigma_dp, delta, q, steps)?.epsilon)
}

/// Smallest σ_DP whose RDP ε does not exceed the target, by bisection.
pub fn calibrate_sigma_rdp(epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    check_common(delta, q, steps)?;
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while epsilon_of_sigma_rdp(hi, delta, q, steps)? > epsilon {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(invalid(format!("no sigma below 1e8 reaches epsilon {epsilon}")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if epsilon_of_sigma_rdp(mid, delta, q, steps)? > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(hi)
}

/// `T = ⌈n/B⌉·epochs`.
pub fn steps_from_epochs(n: usize, batch_size: usize, epochs: u64) -> u64 {
    (n.div_ceil(batch_size)) as u64 * epochs
}

/// `ε* = √(C²TB·ln(1/δ)/(n²(B−σ_γ²)))`, `∞` when `σ_γ² ≥ B`.
pub fn epsilon_star(c: f64, steps: u64, batch_size: usize, n: usize, sigma_gamma: f64, delta: f64) -> Result<f64> {
    if !(c > 0.0) || steps == 0 || batch_size == 0 || n == 0 || !(sigma_gamma >= 0.0) {
        return Err(invalid("epsilon_star needs positive C, T, B, n and sigma_gamma >= 0"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    if batch_size > n {
        return Err(invalid(format!("batch size {batch_size} exceeds n = {n}")));
    }
    let b = batch_size as f64;
    let gap = b - sigma_gamma * sigma_gamma;
    if gap <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let nf = n as f64;
    Ok((c * c * steps as f64 * b * (1.0 / delta).ln() / (nf * nf * gap)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Analytic,
    Rdp,
}

impl std::str::FromStr for CalibrationMode {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "analytic" => Ok(CalibrationMode::Analytic),
            "rdp" => Ok(CalibrationMode::Rdp),
            other => Err(invalid(format!("unknown calibration mode '{other}'"))),
        }
    }
}

/// Privacy budget and mechanism configuration. `epsilon` is `∞` exactly when
/// `sigma_dp` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub n: usize,
    pub batch_size: usize,
    pub q: f64,
    pub steps: u64,
    pub clip: f64,
    pub sigma_dp: f64,
    pub phi: f64,
}

impl PrivacyParams {
    fn base(delta: f64, n: usize, batch_size: usize, steps: u64, clip: f64) -> Result<(f64, f64)> {
        if batch_size == 0 || n == 0 || batch_size > n {
            return Err(invalid(format!("need 1 <= B <= n, got B = {batch_size}, n = {n}")));
        }
        if !(clip > 0.0) {
            return Err(invalid(format!("clip threshold must be > 0, got {clip}")));
        }
        let q = batch_size as f64 / n as f64;
        check_common(delta, q, steps)?;
        Ok((q, phi(q, delta)))
    }

    pub fn from_epsilon(
        epsilon: f64,
        delta: f64,
        n: usize,
        batch_size: usize,
        steps: u64,
        clip: f64,
        mode: CalibrationMode,
    ) -> Result<Self> {
        let (q, phi) = Self::base(delta, n, batch_size, steps, clip)?;
        let sigma_dp = if epsilon.is_infinite() && epsilon > 0.0 {
            0.0
        } else {
            match mode {
                CalibrationMode::Analytic => calibrate_sigma_analytic(epsilon, delta, q, steps)?,
                CalibrationMode::Rdp => calibrate_sigma_rdp(epsilon, delta, q, steps)?,
            }
        };
        Ok(Self {
            epsilon,
            delta,
            n,
            batch_size,
            q,
            steps,
            clip,
            sigma_dp,
            phi,
        })
    }

    pub fn from_sigma(
        sigma_dp: f64,
        delta: f64,
        n: usize,
        batch_size: usize,
        steps: u64,
        clip: f64,
        mode: CalibrationMode,
    ) -> Result<Self> {
        let (q, phi) = Self::base(delta, n, batch_size, steps, clip)?;
        let epsilon = match mode {
            CalibrationMode::Analytic => epsilon_of_sigma_analytic(sigma_dp, delta, q, steps)?,
            CalibrationMode::Rdp => epsilon_of_sigma_rdp(sigma_dp, delta, q, steps)?,
        };
        Ok(Self {
            epsilon,
            delta,
            n,
            batch_size,
            q,
            steps,
            clip,
            sigma_dp,
            phi,
        })
    }

    /// Per-coordinate standard deviation of the injected noise, `Cσ_DP/B`.
    pub fn noise_std(&self) -> f64 {
        self.clip * self.sigma_dp / self.batch_size as f64
    }
}
