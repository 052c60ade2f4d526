#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use tmpd::guidance::{likelihood_score, GuidanceKind};
use tmpd::metrics::{gaussian_w2, sliced_w1, SlicedWassersteinConfig};
use tmpd::prior::{GaussianPrior, MeasurementModel, Prior};
use tmpd::rng::stream;
use tmpd::schedule::NoiseLevel;
use tmpd::tweedie::moments;

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn normal_vec(d: usize, seed: u64) -> DVector<f64> {
    tmpd::prior::standard_normal_matrix(d, 1, &mut stream(seed, &[])).column(0).into_owned()
}

/// Central-difference gradient of the log density against the analytic score.
pub fn score_fd_error(p: &dyn Prior, x: &DVector<f64>, level: NoiseLevel) -> f64 {
    let h = 1e-5 * (1.0 + x.amax());
    let mut fd = DVector::zeros(x.len());
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        fd[i] = (p.log_density(&a, level) - p.log_density(&b, level)) / (2.0 * h);
    }
    let s = p.score(x, level);
    (&s - &fd).norm() / s.norm().max(1.0)
}

/// Central-difference Jacobian of the score against the analytic Hessian.
pub fn hessian_fd_error(p: &dyn Prior, x: &DVector<f64>, level: NoiseLevel) -> f64 {
    let h = 1e-5 * (1.0 + x.amax());
    let d = x.len();
    let mut fd = DMatrix::zeros(d, d);
    for i in 0..d {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        fd.set_column(i, &((p.score(&a, level) - p.score(&b, level)) / (2.0 * h)));
    }
    let hs = p.hessian(x, level).to_dense();
    (&hs - &fd).norm() / hs.norm().max(1.0)
}

/// Likelihood scores of every variant for a standard normal prior under VP,
/// where J and the PiGDM covariance are both isotropic; returns the largest
/// relative deviation from TMPD.
pub fn isotropic_coincidence(d: usize, d_y: usize, alpha: f64, seed: u64) -> f64 {
    let p = GaussianPrior::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
    let level = NoiseLevel::new(alpha, 1.0 - alpha).unwrap();
    let mut h = DMatrix::zeros(d_y, d);
    let coords = rand::seq::index::sample(&mut stream(seed, &[0]), d, d_y).into_vec();
    for (r, &c) in coords.iter().enumerate() {
        h[(r, c)] = 1.0 + r as f64 * 0.25;
    }
    let y = normal_vec(d_y, seed + 1);
    let mm = MeasurementModel::new(h, 0.3, y, None).unwrap();
    let x = normal_vec(d, seed + 2);
    let tm = moments(&p.score(&x, level), &p.hessian(&x, level), &x, level).unwrap();
    let base = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, level).unwrap().vector;
    ["dtmpd", "dtmpd:rowsum", "pigdm"]
        .iter()
        .map(|k| rel(&likelihood_score(k.parse().unwrap(), &tm, &mm, level).unwrap().vector, &base))
        .fold(0.0, f64::max)
}

pub fn random_set(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    tmpd::prior::standard_normal_matrix(n, d, &mut stream(seed, &[]))
}

pub fn sw(n_slices: usize, seed: u64) -> SlicedWassersteinConfig {
    SlicedWassersteinConfig { n_slices, seed }
}

/// sliced_w1(A, A) = 0 and, in one dimension, a translation by c costs |c|.
pub fn sliced_identity_and_translation(n: usize, c: f64, seed: u64) -> (f64, f64) {
    let a = random_set(n, 3, seed);
    let id = sliced_w1(&a, &a, &sw(64, seed)).unwrap();
    let a1 = random_set(n, 1, seed);
    let b1 = a1.map(|v| v + c);
    (id, (sliced_w1(&a1, &b1, &sw(16, seed)).unwrap() - c.abs()).abs())
}

/// Triangle-inequality violation max(0, d(A,C) - d(A,B) - d(B,C)) with shared slices.
pub fn triangle_violation(n: usize, d: usize, seed: u64) -> f64 {
    let (a, b, c) = (random_set(n, d, seed), random_set(n, d, seed + 1).map(|v| 2.0 * v + 1.0), random_set(n, d, seed + 2).map(|v| v - 0.5));
    let cfg = sw(200, seed);
    let ab = sliced_w1(&a, &b, &cfg).unwrap();
    let bc = sliced_w1(&b, &c, &cfg).unwrap();
    let ac = sliced_w1(&a, &c, &cfg).unwrap();
    (ac - ab - bc).max(0.0)
}

/// |W2(N(0, C), N(m, C)) - |m||.
pub fn w2_translation_error(d: usize, seed: u64) -> f64 {
    let r = random_set(d + 2, d, seed);
    let c = r.tr_mul(&r) / d as f64;
    let m = normal_vec(d, seed + 7);
    (gaussian_w2(&DVector::zeros(d), &c, &m, &c).unwrap() - m.norm()).abs()
}
