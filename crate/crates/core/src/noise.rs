//! Batch-noise model: Gaussian batch noise, Student-t per-example noise and
//! the normalized-gradient expectation `K(ν)·g/(σ_γ√d)`.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// Degrees of freedom of the per-example Student-t law. `Infinite` is the
/// Gaussian limit and is never reached by thresholding a finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nu {
    Finite(f64),
    Infinite,
}

impl Nu {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_infinite() && value > 0.0 {
            return Ok(Nu::Infinite);
        }
        if !(value > 0.0) || !value.is_finite() {
            return Err(invalid(format!("nu must be > 0, got {value}")));
        }
        Ok(Nu::Finite(value))
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Nu::Finite(v) => v,
            Nu::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for Nu {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Nu::Finite(v) => s.serialize_f64(*v),
            Nu::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Nu {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let v = match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "gaussian" => f64::INFINITY,
                other => other
                    .parse::<f64>()
                    .map_err(|_| serde::de::Error::custom(format!("bad nu: {t}")))?,
            },
        };
        Nu::new(v).map_err(serde::de::Error::custom)
    }
}

/// `K(ν) = √(2/ν)·Γ((ν+1)/2)/Γ(ν/2)`, exactly 1 for `ν = ∞`.
pub fn k_of_nu(nu: Nu) -> Result<f64> {
    match nu {
        Nu::Infinite => Ok(1.0),
        Nu::Finite(v) => {
            if !(v > 0.0) {
                return Err(invalid(format!("nu must be > 0, got {v}")));
            }
            let log_ratio = ln_gamma((v + 1.0) / 2.0) - ln_gamma(v / 2.0);
            Ok((2.0 / v).sqrt() * log_ratio.exp())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_gamma: f64,
    pub nu: Nu,
    pub batch_size: usize,
}

impl NoiseSpec {
    pub fn new(sigma_gamma: f64, nu: Nu, batch_size: usize) -> Result<Self> {
        if !(sigma_gamma >= 0.0) || !sigma_gamma.is_finite() {
            return Err(invalid(format!("sigma_gamma must be >= 0, got {sigma_gamma}")));
        }
        if batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        Ok(Self {
            sigma_gamma,
            nu,
            batch_size,
        })
    }

    pub fn gaussian(sigma_gamma: f64, batch_size: usize) -> Result<Self> {
        Self::new(sigma_gamma, Nu::Infinite, batch_size)
    }

    pub fn k(&self) -> f64 {
        k_of_nu(self.nu).unwrap_or(1.0)
    }
}

/// One per-example draw `σ_γ·t_ν(0, I_d)` written into `out`.
pub fn sample_per_example_noise_into<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, out: &mut [f64]) {
    if spec.sigma_gamma == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let scale = match spec.nu {
        Nu::Infinite => spec.sigma_gamma,
        Nu::Finite(nu) => {
            let chi = ChiSquared::new(nu).expect("nu validated positive");
            let w: f64 = chi.sample(rng);
            spec.sigma_gamma / (w / nu).sqrt()
        }
    };
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = scale * z;
    }
}

pub fn sample_per_example_noise<R: Rng + ?Sized>(spec: &NoiseSpec, d: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; d];
    sample_per_example_noise_into(spec, rng, &mut out);
    out
}

/// Phase-2 averaged noise `(σ_γ/√B)·N(0, I_d)`.
pub fn sample_batch_noise<R: Rng + ?Sized>(spec: &NoiseSpec, d: usize, rng: &mut R) -> Vec<f64> {
    let scale = spec.sigma_gamma / (spec.batch_size as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

/// Leading-order `E[X/‖X‖]` for `X = g + σ_γ t_ν`: `K(ν)·g/(σ_γ√d)`.
pub fn normalized_gradient_mean(g: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>> {
    if spec.sigma_gamma == 0.0 {
        return Err(invalid("normalized gradient mean is singular at sigma_gamma = 0"));
    }
    let factor = spec.k() / (spec.sigma_gamma * (g.len() as f64).sqrt());
    Ok(g.iter().map(|v| v * factor).collect())
}
