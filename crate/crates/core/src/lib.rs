//! Two-stage Bayesian estimation for 4-level hierarchical longitudinal models
//! of visual-field sensitivities.
//!
//! The hierarchy is individual / eye / hemifield / location, each level
//! carrying a random (intercept, slope) pair over follow-up time. Responses are
//! left-censored at 0 dB. Three nested model variants are supported:
//!
//! * [`ModelVariant::Model1`]: random intercepts and slopes, constant residual variance.
//! * [`ModelVariant::Model2`]: adds a heavy-tailed global visit effect (t with 3 df).
//! * [`ModelVariant::Model3`]: adds a log-linear link between the mean and the residual SD.
//!
//! Estimation runs in two stages. [`stage1::fit_individual`] samples each
//! individual independently under vague priors and emits a [`stage1::SamplePool`].
//! [`stage2::run_stage2`] then combines the pools, resampling individual
//! parameters with an independence Metropolis-Hastings step while the
//! population hyperparameters are drawn from closed-form conditionals.
//! [`evaluation`] provides posterior predictive checks, composition-based
//! recovery of the random effects dropped between the stages, and DIC.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, parallel
//! orchestration and the command-line front end live in the `vfmodel` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod math;
pub mod model;
pub mod one_stage;
pub mod simulate;
pub mod stage1;
pub mod stage2;

mod init;
mod mh;

pub use error::{Error, Result};
pub use model::{
    CovarianceSpec, Design, Eye, FixedEffects, GveScale, IndividualData, ModelVariant, Observation,
    RandomEffects, VarianceParams,
};
