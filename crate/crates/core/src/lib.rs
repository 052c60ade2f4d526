//! Posterior sampling for linear-Gaussian inverse problems with diffusion
//! priors: Tweedie moment projection (TMPD), its diagonal variant, and the DPS
//! and PiGDM baselines, on analytic priors with known posteriors.

pub mod bench;
pub mod error;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tweedie;

pub use error::{Error, Result};
