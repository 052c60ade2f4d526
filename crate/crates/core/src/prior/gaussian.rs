use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::RngCore;

use super::{standard_normal_matrix, MeasurementModel, Prior};
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{eigen_compose, symmetrize, SpdSystem, SymMatrix};
use crate::schedule::NoiseLevel;

/// Matern-5/2 correlation at distance r (unit length scale).
pub fn matern52(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone)]
struct Eigen {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

/// N(m_0, C_0). Scores of the noised marginal use the eigendecomposition of
/// C_0, which is computed on first use.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    eig: Arc<OnceLock<Eigen>>,
}

impl GaussianPrior {
    /// Fails if `cov` is not symmetric or not positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(shape(format!("covariance must be {d}x{d}")));
        }
        if !cov.iter().all(|x| x.is_finite()) || !mean.iter().all(|x| x.is_finite()) {
            return Err(invalid("prior mean and covariance must be finite"));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        let cov = symmetrize(&cov);
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Linalg("covariance is not positive definite; increase the jitter".into()))?
            .unpack();
        Ok(Self { mean, cov, chol, eig: Arc::new(OnceLock::new()) })
    }

    /// Like `new`, but adds the smallest diagonal jitter (relative to the mean
    /// variance, from 1e-14 upwards) that makes the Cholesky factor exist.
    /// Used for posteriors, whose covariance can lose definiteness to round-off.
    pub fn with_minimal_jitter(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let cov = symmetrize(&cov);
        let d = cov.nrows().max(1);
        let base = (cov.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        loop {
            let mut c = cov.clone();
            for i in 0..c.nrows() {
                c[(i, i)] += jitter;
            }
            match Self::new(mean.clone(), c) {
                Ok(p) => return Ok(p),
                Err(Error::Linalg(_)) if jitter < 1e-6 * base => {
                    jitter = if jitter == 0.0 { 1e-14 * base } else { jitter * 10.0 };
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    fn eigen(&self) -> &Eigen {
        self.eig.get_or_init(|| {
            let e = SymmetricEigen::new(self.cov.clone());
            Eigen { vectors: e.eigenvectors, values: e.eigenvalues.map(|l| l.max(0.0)) }
        })
    }

    /// 1 / eigenvalues of C_t = alpha C_0 + v I.
    fn inv_spectrum(&self, level: NoiseLevel) -> DVector<f64> {
        self.eigen().values.map(|l| 1.0 / (level.alpha * l + level.v))
    }

    /// C_t^{-1}, dense.
    pub fn marginal_precision(&self, level: NoiseLevel) -> DMatrix<f64> {
        eigen_compose(&self.eigen().vectors, &self.inv_spectrum(level))
    }

    /// C_t = alpha C_0 + v I.
    pub fn marginal_cov(&self, level: NoiseLevel) -> DMatrix<f64> {
        let mut c = &self.cov * level.alpha;
        for i in 0..c.nrows() {
            c[(i, i)] += level.v;
        }
        c
    }

    pub fn exact_posterior(&self, mm: &MeasurementModel) -> Result<GaussianPrior> {
        mm.check_dim(self.dim())?;
        let h = &mm.h;
        let hc = h * &self.cov;
        let k = symmetrize(&(&hc * h.transpose()));
        let sys = SpdSystem::new(&k, mm.sigma_y.powi(2))?;
        // gain G = C_0 H^T K^{-1}
        let gain = sys.solve_mat(&hc).transpose();
        let resid = &mm.y - h * &self.mean;
        let mean = &self.mean + &gain * resid;
        // Joseph form keeps the covariance PSD under round-off
        let d = self.dim();
        let a = DMatrix::identity(d, d) - &gain * h;
        let cov = &a * &self.cov * a.transpose() + &gain * gain.transpose() * mm.sigma_y.powi(2);
        GaussianPrior::with_minimal_jitter(mean, cov)
    }
}

/// Matern-5/2 Gaussian random field on an equally spaced `grid_side`² grid over
/// `domain`², zero mean, `jitter` added to the diagonal.
pub fn grf_build(grid_side: usize, domain: (f64, f64), jitter: f64) -> Result<GaussianPrior> {
    if grid_side < 2 {
        return Err(invalid("grid_side must be at least 2"));
    }
    if !(domain.1 > domain.0) || !(jitter >= 0.0) {
        return Err(invalid("domain must be increasing and jitter nonnegative"));
    }
    let step = (domain.1 - domain.0) / (grid_side - 1) as f64;
    let pts: Vec<(f64, f64)> = (0..grid_side)
        .flat_map(|i| (0..grid_side).map(move |j| (domain.0 + step * i as f64, domain.0 + step * j as f64)))
        .collect();
    let d = pts.len();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        let (pa, pb) = (pts[a], pts[b]);
        let k = matern52(((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt());
        if a == b { k + jitter } else { k }
    });
    GaussianPrior::new(DVector::zeros(d), cov)
}

impl Prior for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &DVector<f64>, level: NoiseLevel) -> f64 {
        let e = self.eigen();
        let delta = x - &self.mean * level.sqrt_alpha();
        let proj = e.vectors.tr_mul(&delta);
        let inv = self.inv_spectrum(level);
        let quad: f64 = proj.iter().zip(inv.iter()).map(|(p, s)| p * p * s).sum();
        let logdet: f64 = inv.iter().map(|s| -s.ln()).sum();
        -0.5 * (quad + logdet + self.dim() as f64 * (2.0 * PI).ln())
    }

    fn score(&self, x: &DVector<f64>, level: NoiseLevel) -> DVector<f64> {
        let e = self.eigen();
        let delta = x - &self.mean * level.sqrt_alpha();
        let mut proj = e.vectors.tr_mul(&delta);
        proj.component_mul_assign(&self.inv_spectrum(level));
        -(&e.vectors * proj)
    }

    fn hessian(&self, _x: &DVector<f64>, level: NoiseLevel) -> SymMatrix {
        SymMatrix::Dense(-self.marginal_precision(level))
    }

    fn constant_hessian(&self) -> bool {
        true
    }

    fn score_batch(&self, xs: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
        let e = self.eigen();
        let mut delta = xs.clone();
        let shift = &self.mean * level.sqrt_alpha();
        for mut col in delta.column_iter_mut() {
            col -= &shift;
        }
        let mut proj = e.vectors.tr_mul(&delta);
        for (i, s) in self.inv_spectrum(level).iter().enumerate() {
            proj.row_mut(i).scale_mut(-*s);
        }
        &e.vectors * proj
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let z = standard_normal_matrix(d, n, rng);
        let mut x = &self.chol * z;
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        Ok(x.transpose())
    }
}
