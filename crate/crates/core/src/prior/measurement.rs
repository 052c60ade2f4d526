use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{standard_normal_matrix, Prior};
use crate::error::{invalid, shape, Result};

/// Linear-Gaussian observation y = H x + sigma_y z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub h: DMatrix<f64>,
    pub sigma_y: f64,
    pub y: DVector<f64>,
    pub x_star: Option<DVector<f64>>,
}

impl MeasurementModel {
    pub fn new(h: DMatrix<f64>, sigma_y: f64, y: DVector<f64>, x_star: Option<DVector<f64>>) -> Result<Self> {
        if h.nrows() > h.ncols() {
            return Err(invalid(format!("d_y = {} exceeds d_x = {}", h.nrows(), h.ncols())));
        }
        if !(sigma_y > 0.0) || !sigma_y.is_finite() {
            return Err(invalid("sigma_y must be positive and finite"));
        }
        if y.len() != h.nrows() {
            return Err(shape("y length must equal the number of rows of H"));
        }
        if let Some(x) = &x_star {
            if x.len() != h.ncols() {
                return Err(shape("x_star length must equal the number of columns of H"));
            }
        }
        Ok(Self { h, sigma_y, y, x_star })
    }

    pub fn d_x(&self) -> usize {
        self.h.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.h.nrows()
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if self.d_x() == d {
            Ok(())
        } else {
            Err(shape(format!("measurement acts on dimension {}, prior has {d}", self.d_x())))
        }
    }

    /// For operators with at most one nonzero per row, the column index of
    /// that entry (None for an all-zero row). None if some row has two.
    pub fn row_support(&self) -> Option<Vec<Option<usize>>> {
        self.h
            .row_iter()
            .map(|row| {
                let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j);
                let first = nz.next();
                if nz.next().is_some() { None } else { Some(first) }
            })
            .collect()
    }
}

/// Random operator with uniform singular values: H~ has i.i.d. N(0,1) entries,
/// H~ = U S V^T, and its singular values are replaced by U[0,1] draws.
pub fn generate_measurement(prior: &dyn Prior, d_y: usize, sigma_y: f64, rng: &mut dyn RngCore) -> Result<MeasurementModel> {
    let d_x = prior.dim();
    if d_y == 0 || d_y > d_x {
        return Err(invalid(format!("need 1 <= d_y <= d_x, got d_y = {d_y}, d_x = {d_x}")));
    }
    let raw = DMatrix::from_row_iterator(d_y, d_x, standard_normal_matrix(d_y * d_x, 1, rng).iter().cloned());
    let svd = SVD::new(raw, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = DVector::from_fn(svd.singular_values.len(), |_, _| rng.random::<f64>());
    let h = u * DMatrix::from_diagonal(&s) * v_t;
    observe(prior, h, sigma_y, rng)
}

/// Inpainting operator observing `d_y` coordinates chosen uniformly at random.
pub fn generate_mask_measurement(prior: &dyn Prior, d_y: usize, sigma_y: f64, rng: &mut dyn RngCore) -> Result<MeasurementModel> {
    let d_x = prior.dim();
    if d_y == 0 || d_y > d_x {
        return Err(invalid(format!("need 1 <= d_y <= d_x, got d_y = {d_y}, d_x = {d_x}")));
    }
    let mut idx = rand::seq::index::sample(rng, d_x, d_y).into_vec();
    idx.sort_unstable();
    let mut h = DMatrix::zeros(d_y, d_x);
    for (r, &c) in idx.iter().enumerate() {
        h[(r, c)] = 1.0;
    }
    observe(prior, h, sigma_y, rng)
}

fn observe(prior: &dyn Prior, h: DMatrix<f64>, sigma_y: f64, rng: &mut dyn RngCore) -> Result<MeasurementModel> {
    let x_star = prior.sample(1, rng)?.row(0).transpose();
    let noise = standard_normal_matrix(h.nrows(), 1, rng).column(0).into_owned();
    let y = &h * &x_star + noise * sigma_y;
    MeasurementModel::new(h, sigma_y, y, Some(x_star))
}
