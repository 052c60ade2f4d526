//! Sample-set and Gaussian distances.

use nalgebra::{DMatrix, DVector, SVD};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{psd_apply, symmetrize};
use crate::rng::stream;

pub const DEFAULT_SLICES: usize = 10_000;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlicedWassersteinConfig {
    pub n_slices: usize,
    pub seed: u64,
}

impl Default for SlicedWassersteinConfig {
    fn default() -> Self {
        Self { n_slices: DEFAULT_SLICES, seed: 0 }
    }
}

/// Unit directions, one per column, for slices `start..start + count`.
fn directions(d: usize, seed: u64, chunk: usize, count: usize) -> DMatrix<f64> {
    let mut rng = stream(seed, &[chunk as u64]);
    let mut theta = DMatrix::zeros(d, count);
    for mut col in theta.column_iter_mut() {
        loop {
            for v in col.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = col.norm();
            if n > 0.0 {
                col /= n;
                break;
            }
        }
    }
    theta
}

fn sorted(col: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = col.collect();
    v.sort_unstable_by(f64::total_cmp);
    v
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * sorted.len() as f64 - 0.5).clamp(0.0, (sorted.len() - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// 1-D Wasserstein-1 between two sorted samples.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let grid = 2 * a.len().max(b.len());
    (0..grid)
        .map(|k| {
            let q = (k as f64 + 0.5) / grid as f64;
            (quantile(a, q) - quantile(b, q)).abs()
        })
        .sum::<f64>()
        / grid as f64
}

/// Sliced Wasserstein-1 between sample sets (rows are samples), averaged over
/// `cfg.n_slices` random directions drawn from `cfg.seed`.
pub fn sliced_w1(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &SlicedWassersteinConfig) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(invalid("sliced_w1 needs nonempty sample sets"));
    }
    if a.ncols() != b.ncols() {
        return Err(shape("sample sets have different dimensions"));
    }
    if cfg.n_slices == 0 {
        return Err(invalid("n_slices must be at least 1"));
    }
    let d = a.ncols();
    let chunks = cfg.n_slices.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(cfg.n_slices - c * CHUNK);
            let theta = directions(d, cfg.seed, c, count);
            let (pa, pb) = (a * &theta, b * &theta);
            (0..count).map(|j| w1_sorted(&sorted(pa.column(j).iter().cloned()), &sorted(pb.column(j).iter().cloned()))).sum()
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / cfg.n_slices as f64)
}

/// Wasserstein-2 distance between N(m1, c1) and N(m2, c2).
pub fn gaussian_w2(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.shape() != (d, d) || c2.shape() != (d, d) {
        return Err(shape("means and covariances must share one dimension"));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    if !m1.iter().chain(m2.iter()).all(|x| x.is_finite()) || !finite(c1) || !finite(c2) {
        return Err(invalid("gaussian_w2 inputs must be finite"));
    }
    let mean_term = (m1 - m2).norm_squared();
    let (c1, c2) = (symmetrize(c1), symmetrize(c2));
    let cov_term = if c1 == c2 {
        0.0
    } else {
        // the covariance term is homogeneous of degree one, so work at unit scale
        let scale = c1.amax().max(c2.amax());
        let (c1, c2) = (c1 / scale, c2 / scale);
        // tr (C1^1/2 C2 C1^1/2)^1/2 is the nuclear norm of C1^1/2 C2^1/2
        let s1 = psd_apply(&c1, f64::sqrt);
        let s2 = psd_apply(&c2, f64::sqrt);
        let nuclear: f64 = SVD::new(s1 * s2, false, false).singular_values.sum();
        scale * (c1.trace() + c2.trace() - 2.0 * nuclear).max(0.0)
    };
    if !cov_term.is_finite() {
        return Err(Error::Linalg("gaussian_w2 covariance term overflowed".into()));
    }
    Ok((mean_term + cov_term).sqrt())
}

/// Sample mean and unbiased covariance of the rows of `a`.
pub fn empirical_moments(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if n < 2 {
        return Err(invalid("empirical moments need at least 2 samples"));
    }
    let mean = a.row_mean().transpose();
    let mut centred = a.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = symmetrize(&(centred.tr_mul(&centred) / (n - 1) as f64));
    Ok((mean, cov))
}
