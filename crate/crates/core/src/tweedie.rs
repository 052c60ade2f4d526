//! Tweedie moments of p(x_0 | x_t) from the score and Hessian of p_t.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, shape, Result};
use crate::linalg::SymMatrix;
use crate::schedule::{NoiseLevel, Schedule, SdeKind};

/// m = E[x_0 | x_t], j = dm/dx_t, c = Cov[x_0 | x_t] = (v / sqrt(alpha)) j.
#[derive(Debug, Clone, PartialEq)]
pub struct TweedieMoments {
    pub m: DVector<f64>,
    pub j: SymMatrix,
    pub c: SymMatrix,
}

/// Moments at a given noise level. With `alpha = 1` this is the VE form.
pub fn moments(score: &DVector<f64>, hessian: &SymMatrix, x: &DVector<f64>, level: NoiseLevel) -> Result<TweedieMoments> {
    let d = x.len();
    if score.len() != d || hessian.dim() != d {
        return Err(shape("score, Hessian and state dimensions differ"));
    }
    let sa = level.sqrt_alpha();
    let m = (x + score * level.v) / sa;
    let j = hessian.affine(1.0 / sa, level.v / sa).symmetrized();
    let c = j.scale(level.v / sa);
    Ok(TweedieMoments { m, j, c })
}

pub fn moments_vp(score: &DVector<f64>, hessian: &SymMatrix, x: &DVector<f64>, t: f64, schedule: &Schedule) -> Result<TweedieMoments> {
    if schedule.kind() != SdeKind::Vp {
        return Err(invalid("moments_vp needs a VP schedule"));
    }
    moments(score, hessian, x, schedule.level(t)?)
}

pub fn moments_ve(score: &DVector<f64>, hessian: &SymMatrix, x: &DVector<f64>, t: f64, schedule: &Schedule) -> Result<TweedieMoments> {
    if schedule.kind() != SdeKind::Ve {
        return Err(invalid("moments_ve needs a VE schedule"));
    }
    moments(score, hessian, x, schedule.level(t)?)
}

/// Tweedie means of the columns of `xs` given their scores.
pub fn mean_batch(xs: &DMatrix<f64>, scores: &DMatrix<f64>, level: NoiseLevel) -> DMatrix<f64> {
    (xs + scores * level.v) / level.sqrt_alpha()
}
