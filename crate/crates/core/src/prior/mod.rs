//! Analytic priors with closed-form noised marginals, exact posteriors and
//! measurement-model generation.

mod gaussian;
mod gmm;
mod measurement;

pub use gaussian::{grf_build, matern52, GaussianPrior};
pub use gmm::{gmm_build, GmmPrior, PosteriorGmm};
pub use measurement::{generate_mask_measurement, generate_measurement, MeasurementModel};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape, Result};
use crate::linalg::SymMatrix;
use crate::schedule::{NoiseLevel, Schedule};

/// A prior whose noised marginals p_t have closed-form log density, score and
/// Hessian. Methods taking a `NoiseLevel` assume the dimension has been checked.
pub trait Prior: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &DVector<f64>, level: NoiseLevel) -> f64;

    fn score(&self, x: &DVector<f64>, level: NoiseLevel) -> DVector<f64>;

    fn hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> SymMatrix;

    /// Score and Hessian together; mixtures share the responsibilities.
    fn score_and_hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> (DVector<f64>, SymMatrix) {
        (self.score(x, level), self.hessian(x, level))
    }

    /// True when the Hessian of log p_t does not depend on x.
    fn constant_hessian(&self) -> bool {
        false
    }

    /// Scores of the columns of `xs`.
    fn score_batch(&self, xs: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(xs.nrows(), xs.ncols());
        for (j, col) in xs.column_iter().enumerate() {
            out.set_column(j, &self.score(&col.into_owned(), level));
        }
        out
    }

    /// `n` draws from p_0, one per row.
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>>;

    fn log_density_t(&self, x: &DVector<f64>, t: f64, schedule: &Schedule) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(self.log_density(x, schedule.level(t)?))
    }

    fn score_t(&self, x: &DVector<f64>, t: f64, schedule: &Schedule) -> Result<DVector<f64>> {
        check_dim(self.dim(), x)?;
        Ok(self.score(x, schedule.level(t)?))
    }

    fn hessian_t(&self, x: &DVector<f64>, t: f64, schedule: &Schedule) -> Result<SymMatrix> {
        check_dim(self.dim(), x)?;
        Ok(self.hessian(x, schedule.level(t)?))
    }
}

pub(crate) fn check_dim(d: usize, x: &DVector<f64>) -> Result<()> {
    if x.len() == d {
        Ok(())
    } else {
        Err(shape(format!("expected a vector of length {d}, got {}", x.len())))
    }
}

pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    // column-major fill: each column is consumed contiguously from the stream
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Either prior family, for callers that pick one at runtime.
#[derive(Debug, Clone)]
pub enum AnyPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

/// Exact posterior under a linear-Gaussian observation.
#[derive(Debug, Clone)]
pub enum Posterior {
    Gaussian(GaussianPrior),
    Gmm(PosteriorGmm),
}

impl Posterior {
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        match self {
            Posterior::Gaussian(g) => g.sample(n, rng),
            Posterior::Gmm(g) => g.sample(n, rng),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Posterior::Gaussian(g) => g.dim(),
            Posterior::Gmm(g) => g.dim(),
        }
    }
}

impl AnyPrior {
    pub fn exact_posterior(&self, mm: &MeasurementModel) -> Result<Posterior> {
        match self {
            AnyPrior::Gaussian(g) => g.exact_posterior(mm).map(Posterior::Gaussian),
            AnyPrior::Gmm(g) => g.exact_posterior(mm).map(Posterior::Gmm),
        }
    }

    pub fn inner(&self) -> &dyn Prior {
        match self {
            AnyPrior::Gaussian(g) => g,
            AnyPrior::Gmm(g) => g,
        }
    }
}

impl Prior for AnyPrior {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn log_density(&self, x: &DVector<f64>, level: NoiseLevel) -> f64 {
        self.inner().log_density(x, level)
    }
    fn score(&self, x: &DVector<f64>, level: NoiseLevel) -> DVector<f64> {
        self.inner().score(x, level)
    }
    fn hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> SymMatrix {
        self.inner().hessian(x, level)
    }
    fn score_and_hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> (DVector<f64>, SymMatrix) {
        self.inner().score_and_hessian(x, level)
    }
    fn constant_hessian(&self) -> bool {
        self.inner().constant_hessian()
    }
    fn score_batch(&self, xs: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        self.inner().score_batch(xs, level)
    }
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        self.inner().sample(n, rng)
    }
}

pub fn exact_posterior(prior: &AnyPrior, mm: &MeasurementModel) -> Result<Posterior> {
    prior.exact_posterior(mm)
}
