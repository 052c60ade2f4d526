use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};

use super::{standard_normal_matrix, MeasurementModel, Prior};
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{symmetrize, SymMatrix};
use crate::schedule::NoiseLevel;

/// Responsibilities below this are dropped from the low-rank Hessian.
const PRUNE: f64 = 1e-16;

/// Isotropic Gaussian mixture: components N(mu_k, s I) with weights w_k.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    means: DMatrix<f64>,
    log_weights: DVector<f64>,
    component_var: f64,
    mean_sq: DVector<f64>,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn normalize_log(log_w: &mut [f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter_mut().for_each(|l| *l -= lse);
    log_w.iter().map(|l| l.exp()).collect()
}

/// The 25-component grid mixture with means (8i, 8j, 8i, 8j, ...) for
/// i, j in -2..=2, unit covariance and equal weights.
pub fn gmm_build(d_x: usize) -> Result<GmmPrior> {
    if d_x < 2 || d_x % 2 != 0 {
        return Err(invalid(format!("GMM dimension must be even and >= 2, got {d_x}")));
    }
    let mut means = DMatrix::zeros(d_x, 25);
    let mut k = 0;
    for i in -2i32..=2 {
        for j in -2i32..=2 {
            for r in 0..d_x {
                means[(r, k)] = 8.0 * if r % 2 == 0 { i } else { j } as f64;
            }
            k += 1;
        }
    }
    GmmPrior::new(means, DVector::from_element(25, 1.0), 1.0)
}

impl GmmPrior {
    /// `means` holds one component mean per column; weights are normalised.
    pub fn new(means: DMatrix<f64>, weights: DVector<f64>, component_var: f64) -> Result<Self> {
        if means.ncols() == 0 || means.ncols() != weights.len() {
            return Err(shape("need one weight per component and at least one component"));
        }
        if !means.iter().all(|x| x.is_finite()) {
            return Err(invalid("component means must be finite"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || weights.sum() <= 0.0 {
            return Err(invalid("weights must be nonnegative with positive sum"));
        }
        if !(component_var > 0.0 && component_var.is_finite()) {
            return Err(invalid("component variance must be positive"));
        }
        let total = weights.sum();
        let log_weights = weights.map(|w| (w / total).ln());
        let mean_sq = DVector::from_iterator(means.ncols(), means.column_iter().map(|c| c.norm_squared()));
        Ok(Self { means, log_weights, component_var, mean_sq })
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn weights(&self) -> DVector<f64> {
        self.log_weights.map(f64::exp)
    }

    pub fn component_var(&self) -> f64 {
        self.component_var
    }

    pub fn n_components(&self) -> usize {
        self.means.ncols()
    }

    fn marginal_var(&self, level: NoiseLevel) -> f64 {
        level.alpha * self.component_var + level.v
    }

    /// Responsibilities of the components of p_t at x. The |x|^2 term is common
    /// to all components and is left out to avoid cancellation.
    pub fn responsibilities(&self, x: &DVector<f64>, level: NoiseLevel) -> Vec<f64> {
        let var = self.marginal_var(level);
        let sa = level.sqrt_alpha();
        let dots = self.means.tr_mul(x);
        let mut logits: Vec<f64> = (0..self.n_components())
            .map(|k| self.log_weights[k] + (sa * dots[k] - 0.5 * level.alpha * self.mean_sq[k]) / var)
            .collect();
        normalize_log(&mut logits)
    }

    fn mean_under(&self, r: &[f64]) -> DVector<f64> {
        &self.means * DVector::from_column_slice(r)
    }

    fn score_given(&self, x: &DVector<f64>, level: NoiseLevel, mu_bar: &DVector<f64>) -> DVector<f64> {
        let mut s = mu_bar * level.sqrt_alpha();
        s -= x;
        s / self.marginal_var(level)
    }

    /// -I/var + sum_k r_k d_k d_k^T with d_k = sqrt(alpha) (mu_k - mu_bar) / var,
    /// which equals sum_k r_k (s_k s_k^T - Lambda) - s_bar s_bar^T.
    fn hessian_given(&self, level: NoiseLevel, r: &[f64], mu_bar: &DVector<f64>) -> SymMatrix {
        let var = self.marginal_var(level);
        let keep: Vec<usize> = (0..r.len()).filter(|&k| r[k] > PRUNE).collect();
        let c = level.sqrt_alpha() / var;
        let mut factors = DMatrix::zeros(self.means.nrows(), keep.len());
        for (col, &k) in keep.iter().enumerate() {
            let mut f = factors.column_mut(col);
            f.copy_from(&self.means.column(k));
            f -= mu_bar;
            f *= c;
        }
        let weights = DVector::from_iterator(keep.len(), keep.iter().map(|&k| r[k]));
        SymMatrix::LowRank { shift: -1.0 / var, factors: Arc::new(factors), weights }
    }

    pub fn exact_posterior(&self, mm: &MeasurementModel) -> Result<PosteriorGmm> {
        let d = self.means.nrows();
        mm.check_dim(d)?;
        let (h, s2, s0) = (&mm.h, mm.sigma_y.powi(2), self.component_var);
        let mut prec = h.tr_mul(h) / s2;
        for i in 0..d {
            prec[(i, i)] += 1.0 / s0;
        }
        let prec_chol = Cholesky::new(symmetrize(&prec)).ok_or_else(|| Error::Linalg("posterior precision not PD".into()))?;
        let cov = symmetrize(&prec_chol.inverse());
        let ht_y = h.tr_mul(&mm.y) / s2;
        let mut rhs = &self.means / s0;
        for mut col in rhs.column_iter_mut() {
            col += &ht_y;
        }
        let means = prec_chol.solve(&rhs);

        // evidence of each component: N(y; H mu_k, sigma^2 I + s0 H H^T)
        let mut marg = h * h.transpose() * s0;
        for i in 0..marg.nrows() {
            marg[(i, i)] += s2;
        }
        let marg_chol = Cholesky::new(symmetrize(&marg)).ok_or_else(|| Error::Linalg("evidence covariance not PD".into()))?;
        let mut resid = -(h * &self.means);
        for mut col in resid.column_iter_mut() {
            col += &mm.y;
        }
        let white = marg_chol.l().solve_lower_triangular(&resid).ok_or_else(|| Error::Linalg("triangular solve failed".into()))?;
        let mut log_w: Vec<f64> = (0..self.n_components())
            .map(|k| self.log_weights[k] - 0.5 * white.column(k).norm_squared())
            .collect();
        let weights = normalize_log(&mut log_w);
        PosteriorGmm::new(means, cov, DVector::from_vec(weights))
    }
}

impl Prior for GmmPrior {
    fn dim(&self) -> usize {
        self.means.nrows()
    }

    fn log_density(&self, x: &DVector<f64>, level: NoiseLevel) -> f64 {
        let var = self.marginal_var(level);
        let sa = level.sqrt_alpha();
        let terms: Vec<f64> = self
            .means
            .column_iter()
            .zip(self.log_weights.iter())
            .map(|(mu, lw)| {
                let dist: f64 = x.iter().zip(mu.iter()).map(|(xi, mi)| (xi - sa * mi).powi(2)).sum();
                lw - 0.5 * dist / var
            })
            .collect();
        log_sum_exp(&terms) - 0.5 * self.dim() as f64 * (2.0 * PI * var).ln()
    }

    fn score(&self, x: &DVector<f64>, level: NoiseLevel) -> DVector<f64> {
        let r = self.responsibilities(x, level);
        self.score_given(x, level, &self.mean_under(&r))
    }

    fn hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> SymMatrix {
        let r = self.responsibilities(x, level);
        self.hessian_given(level, &r, &self.mean_under(&r))
    }

    fn score_and_hessian(&self, x: &DVector<f64>, level: NoiseLevel) -> (DVector<f64>, SymMatrix) {
        let r = self.responsibilities(x, level);
        let mu_bar = self.mean_under(&r);
        (self.score_given(x, level, &mu_bar), self.hessian_given(level, &r, &mu_bar))
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        let weights = self.weights();
        let sd = self.component_var.sqrt();
        sample_mixture(&self.means, &weights, n, rng, |z| z * sd)
    }
}

fn pick(weights: &DVector<f64>, rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn sample_mixture(
    means: &DMatrix<f64>,
    weights: &DVector<f64>,
    n: usize,
    rng: &mut dyn RngCore,
    colour: impl Fn(DVector<f64>) -> DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = means.nrows();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let k = pick(weights, rng);
        let z = standard_normal_matrix(d, 1, rng).column(0).into_owned();
        let x = colour(z) + means.column(k);
        out.set_row(i, &x.transpose());
    }
    Ok(out)
}

/// Exact posterior of a GMM prior: components N(c_k, Sigma) with weights w~_k.
#[derive(Debug, Clone)]
pub struct PosteriorGmm {
    pub means: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub weights: DVector<f64>,
    chol: DMatrix<f64>,
}

impl PosteriorGmm {
    pub fn new(means: DMatrix<f64>, cov: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::Linalg("posterior covariance not PD".into()))?.unpack();
        Ok(Self { means, cov, weights, chol })
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<DMatrix<f64>> {
        sample_mixture(&self.means, &self.weights, n, rng, |z| &self.chol * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn grid_means() {
        let g = gmm_build(8).unwrap();
        // component (i=1, j=-2) is the 3*5 + 0 = 15th
        let want = [8.0, -16.0, 8.0, -16.0, 8.0, -16.0, 8.0, -16.0];
        assert_eq!(g.means().column(15).as_slice(), &want);
        let g2 = gmm_build(2).unwrap();
        assert_eq!(g2.means().column(12).as_slice(), &[0.0, 0.0]);
        assert!(g.weights().iter().all(|&w| (w - 0.04).abs() < 1e-15));
        assert!((g.weights().sum() - 1.0).abs() < 1e-12);
        assert!(gmm_build(7).is_err());
        assert!(gmm_build(0).is_err());
    }

    #[test]
    fn isolated_mode_is_single_gaussian() {
        let g = gmm_build(2).unwrap();
        let level = NoiseLevel::new(0.8, 0.2).unwrap();
        let mu = g.means().column(0).into_owned() * level.sqrt_alpha();
        let x = &mu + DVector::from_vec(vec![0.3, -0.2]);
        let s = g.score(&x, level);
        assert!((s + (&x - &mu)).norm() < 1e-6);
        let h = g.hessian(&x, level).to_dense();
        assert!((h + DMatrix::identity(2, 2)).norm() < 1e-6);
    }

    #[test]
    fn single_component_hessian() {
        let g = GmmPrior::new(DMatrix::from_element(3, 1, 2.0), DVector::from_element(1, 1.0), 1.0).unwrap();
        let level = NoiseLevel::new(1.0, 0.5).unwrap();
        let h = g.hessian(&DVector::from_vec(vec![1.0, 5.0, -3.0]), level).to_dense();
        assert!((h + DMatrix::identity(3, 3) / 1.5).norm() < 1e-14);
    }

    #[test]
    fn posterior_weights_brute_force() {
        let g = gmm_build(2).unwrap();
        let mm = MeasurementModel::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.1, DVector::from_element(1, 8.0), None).unwrap();
        let post = g.exact_posterior(&mm).unwrap();
        // brute force: N(8; 8i, 0.01 + 1) over the grid
        let mut raw = vec![];
        for i in -2i32..=2 {
            for _ in -2..=2 {
                let m = 8.0 * i as f64;
                raw.push((-(8.0 - m).powi(2) / (2.0 * 1.01)).exp());
            }
        }
        let total: f64 = raw.iter().sum();
        for (k, r) in raw.iter().enumerate() {
            assert!((post.weights[k] - r / total).abs() < 1e-12);
        }
        for k in 15..20 {
            assert!((post.weights[k] - 0.2).abs() < 1e-6);
        }
        assert!((post.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uninformative_limit() {
        let g = gmm_build(2).unwrap();
        let mm = MeasurementModel::new(DMatrix::identity(2, 2), 1e8, DVector::from_vec(vec![3.0, 1.0]), None).unwrap();
        let post = g.exact_posterior(&mm).unwrap();
        assert!(post.weights.iter().all(|w| (w - 0.04).abs() < 1e-6));
        assert!((&post.cov - DMatrix::identity(2, 2)).norm() < 1e-6);
    }

    #[test]
    fn high_dim_weights_do_not_underflow() {
        let g = gmm_build(800).unwrap();
        let mut rng = stream(2, &[]);
        let mm = crate::prior::generate_measurement(&g, 4, 0.01, &mut rng).unwrap();
        let post = g.exact_posterior(&mm).unwrap();
        assert!((post.weights.sum() - 1.0).abs() < 1e-12);
        assert!(post.weights.iter().all(|w| w.is_finite()));
        assert!(post.weights.max() > 0.0);
    }

    #[test]
    fn component_frequencies() {
        let g = gmm_build(2).unwrap();
        let mut rng = stream(9, &[]);
        let xs = g.sample(100_000, &mut rng).unwrap();
        let mut counts = [0usize; 25];
        for row in xs.row_iter() {
            let k = g
                .means()
                .column_iter()
                .enumerate()
                .min_by(|a, b| (row.transpose() - a.1).norm().total_cmp(&(row.transpose() - b.1).norm()))
                .unwrap()
                .0;
            counts[k] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.04).abs() < 0.01);
        }
    }
}
