//! Differentially private optimizers, their SDE models and closed-form
//! theory, with a Monte-Carlo experiment harness.

pub mod error;
pub mod harness;
pub mod noise;
pub mod objectives;
pub mod optimizers;
pub mod privacy;
pub mod record;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod theory;
mod vecops;

pub use error::{Error, Result};
pub use noise::{k_of_nu, NoiseSpec, Nu};
pub use objectives::{make_synthetic_logistic, LogisticDataset, Objective, ObjectiveKind};
pub use optimizers::{run_optimizer, AdamParams, LrSchedule, Method, OptimizerConfig, OptimizerState, Sampling};
pub use privacy::{CalibrationMode, PrivacyParams};
pub use record::{RunRecord, Source};
pub use sde::{euler_maruyama, SdeLabel, SdeModel};
pub use theory::BoundInputs;
