//! Likelihood-score approximations: TMPD, diagonal TMPD, DPS and PiGDM, and
//! the Gaussian Bayes update of the Tweedie mean.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Fallback, SpdSystem, SymMatrix};
use crate::prior::MeasurementModel;
use crate::schedule::{NoiseLevel, Schedule};
use crate::tweedie::TweedieMoments;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagMode {
    /// diag(C).
    Exact,
    /// Row sums of C restricted to observed coordinates.
    RowSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceKind {
    None,
    Tmpd,
    Dtmpd(DiagMode),
    /// Zero-covariance limit weighted by 1/sigma_y^2.
    Dps,
    /// Gradient of ||y - Hm||^2 / 2 rescaled by zeta / ||y - Hm||, applied as a state shift.
    DpsChung { zeta: f64 },
    Pigdm,
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuidanceKind::None => write!(f, "none"),
            GuidanceKind::Tmpd => write!(f, "tmpd"),
            GuidanceKind::Dtmpd(DiagMode::Exact) => write!(f, "dtmpd"),
            GuidanceKind::Dtmpd(DiagMode::RowSum) => write!(f, "dtmpd:rowsum"),
            GuidanceKind::Dps => write!(f, "dps"),
            GuidanceKind::DpsChung { zeta } => write!(f, "dps-chung:{zeta}"),
            GuidanceKind::Pigdm => write!(f, "pigdm"),
        }
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let no_arg = |k: GuidanceKind| match arg {
            None => Ok(k),
            Some(_) => Err(invalid(format!("guidance '{s}' takes no parameter"))),
        };
        match name {
            "none" => no_arg(GuidanceKind::None),
            "tmpd" => no_arg(GuidanceKind::Tmpd),
            "pigdm" => no_arg(GuidanceKind::Pigdm),
            "dps" => no_arg(GuidanceKind::Dps),
            "dtmpd" => match arg {
                None | Some("diag") => Ok(GuidanceKind::Dtmpd(DiagMode::Exact)),
                Some("rowsum") => Ok(GuidanceKind::Dtmpd(DiagMode::RowSum)),
                Some(other) => Err(invalid(format!("unknown dtmpd mode '{other}'"))),
            },
            "dps-chung" => {
                let zeta: f64 = arg
                    .ok_or_else(|| invalid("dps-chung needs a step size, e.g. dps-chung:0.5"))?
                    .parse()
                    .map_err(|_| invalid(format!("bad step size in '{s}'")))?;
                if !(zeta > 0.0 && zeta.is_finite()) {
                    return Err(invalid("dps-chung step size must be positive"));
                }
                Ok(GuidanceKind::DpsChung { zeta })
            }
            _ => Err(invalid(format!("unknown guidance '{s}'"))),
        }
    }
}

impl Serialize for GuidanceKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GuidanceKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// PiGDM's r_t^2 = v / (v + alpha); alpha = 1 gives the VE form v / (1 + v).
pub fn pigdm_r2(level: NoiseLevel) -> f64 {
    level.v / (level.v + level.alpha)
}

/// H C' H^T for the covariance model C' assumed by `kind`.
fn data_block(kind: GuidanceKind, tm: &TweedieMoments, mm: &MeasurementModel, level: NoiseLevel) -> Result<DMatrix<f64>> {
    let h = &mm.h;
    Ok(match kind {
        GuidanceKind::Tmpd => tm.c.sandwich(h),
        GuidanceKind::Dtmpd(DiagMode::Exact) => diag_sandwich(h, &tm.c.diagonal()),
        GuidanceKind::Dtmpd(DiagMode::RowSum) => {
            let support = mm
                .row_support()
                .ok_or_else(|| Error::Unsupported("row-sum DTMPD needs an operator with at most one nonzero per row".into()))?;
            let mut mask = DVector::zeros(mm.d_x());
            for j in support.iter().flatten() {
                mask[*j] = 1.0;
            }
            let rowsum = tm.c.mul_vec(&mask);
            let mut k = DMatrix::zeros(mm.d_y(), mm.d_y());
            for (r, j) in support.iter().enumerate() {
                if let Some(j) = j {
                    k[(r, r)] = h[(r, *j)].powi(2) * rowsum[*j];
                }
            }
            k
        }
        GuidanceKind::Pigdm => h * h.transpose() * pigdm_r2(level),
        GuidanceKind::Dps | GuidanceKind::DpsChung { .. } | GuidanceKind::None => DMatrix::zeros(mm.d_y(), mm.d_y()),
    })
}

fn diag_sandwich(h: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let mut hd = h.clone();
    for (mut col, c) in hd.column_iter_mut().zip(diag.iter()) {
        col *= *c;
    }
    hd * h.transpose()
}

/// A guidance vector and whether its linear solve needed repair.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub vector: DVector<f64>,
    pub fallback: Fallback,
}

/// Approximate grad log p(y | x_t) for any variant. For `DpsChung` the result
/// is the rescaled step, not a score.
pub fn likelihood_score(kind: GuidanceKind, tm: &TweedieMoments, mm: &MeasurementModel, level: NoiseLevel) -> Result<Guidance> {
    mm.check_dim(tm.m.len())?;
    let resid = &mm.y - &mm.h * &tm.m;
    match kind {
        GuidanceKind::None => Ok(Guidance { vector: DVector::zeros(tm.m.len()), fallback: Fallback::None }),
        GuidanceKind::DpsChung { zeta } => {
            let n = resid.norm();
            let vector = if n == 0.0 { DVector::zeros(tm.m.len()) } else { tm.j.mul_vec(&mm.h.tr_mul(&resid)) * (zeta / n) };
            Ok(Guidance { vector, fallback: Fallback::None })
        }
        GuidanceKind::Dps => {
            let vector = tm.j.mul_vec(&mm.h.tr_mul(&resid)) / mm.sigma_y.powi(2);
            Ok(Guidance { vector, fallback: Fallback::None })
        }
        _ => {
            let sys = SpdSystem::new(&data_block(kind, tm, mm, level)?, mm.sigma_y.powi(2))?;
            let w = sys.solve_vec(&resid);
            Ok(Guidance { vector: tm.j.mul_vec(&mm.h.tr_mul(&w)), fallback: sys.fallback })
        }
    }
}

pub fn likelihood_score_tmpd(tm: &TweedieMoments, mm: &MeasurementModel, t: f64, schedule: &Schedule) -> Result<DVector<f64>> {
    Ok(likelihood_score(GuidanceKind::Tmpd, tm, mm, schedule.level(t)?)?.vector)
}

pub fn likelihood_score_dtmpd(tm: &TweedieMoments, mm: &MeasurementModel, t: f64, schedule: &Schedule, mode: DiagMode) -> Result<DVector<f64>> {
    Ok(likelihood_score(GuidanceKind::Dtmpd(mode), tm, mm, schedule.level(t)?)?.vector)
}

pub fn likelihood_score_pigdm(m: &DVector<f64>, j: &SymMatrix, mm: &MeasurementModel, t: f64, schedule: &Schedule) -> Result<DVector<f64>> {
    let level = schedule.level(t)?;
    let tm = TweedieMoments { m: m.clone(), j: j.clone(), c: SymMatrix::scaled_identity(m.len(), pigdm_r2(level)) };
    Ok(likelihood_score(GuidanceKind::Pigdm, &tm, mm, level)?.vector)
}

/// `kind` must be `Dps` or `DpsChung`.
pub fn likelihood_score_dps(m: &DVector<f64>, j: &SymMatrix, mm: &MeasurementModel, kind: GuidanceKind) -> Result<DVector<f64>> {
    if !matches!(kind, GuidanceKind::Dps | GuidanceKind::DpsChung { .. }) {
        return Err(invalid(format!("'{kind}' is not a DPS variant")));
    }
    let tm = TweedieMoments { m: m.clone(), j: j.clone(), c: SymMatrix::scaled_identity(m.len(), 0.0) };
    Ok(likelihood_score(kind, &tm, mm, NoiseLevel { alpha: 1.0, v: 0.0 })?.vector)
}

/// m^y = m + C H^T (H C H^T + sigma_y^2 I)^{-1} (y - H m).
pub fn bayes_update_mean(tm: &TweedieMoments, mm: &MeasurementModel) -> Result<DVector<f64>> {
    mm.check_dim(tm.m.len())?;
    let resid = &mm.y - &mm.h * &tm.m;
    let sys = SpdSystem::new(&tm.c.sandwich(&mm.h), mm.sigma_y.powi(2))?;
    Ok(&tm.m + tm.c.mul_vec(&mm.h.tr_mul(&sys.solve_vec(&resid))))
}

/// Guidance as a fixed linear map of the residual, for priors whose J and C do
/// not depend on the state: f = gain (y - H m), optionally scaled by
/// zeta / ||y - H m|| (DPS-Chung, where the gain already holds zeta J H^T).
pub struct GuidanceGain {
    pub gain: DMatrix<f64>,
    pub normalize: bool,
    pub fallback: Fallback,
}

impl GuidanceGain {
    pub fn new(kind: GuidanceKind, tm: &TweedieMoments, mm: &MeasurementModel, level: NoiseLevel) -> Result<Self> {
        mm.check_dim(tm.m.len())?;
        let jht = tm.j.mul_mat(&mm.h.transpose());
        let (gain, normalize, fallback) = match kind {
            GuidanceKind::None => (DMatrix::zeros(mm.d_x(), mm.d_y()), false, Fallback::None),
            GuidanceKind::DpsChung { zeta } => (jht * zeta, true, Fallback::None),
            GuidanceKind::Dps => (jht / mm.sigma_y.powi(2), false, Fallback::None),
            _ => {
                let sys = SpdSystem::new(&data_block(kind, tm, mm, level)?, mm.sigma_y.powi(2))?;
                // gain = J H^T K^{-1} = (K^{-1} H J)^T since K and J are symmetric
                (sys.solve_mat(&jht.transpose()).transpose(), false, sys.fallback)
            }
        };
        Ok(Self { gain, normalize, fallback })
    }

    /// Guidance for each column of `resid` (d_y × batch).
    pub fn apply(&self, resid: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.gain * resid;
        if self.normalize {
            for (mut col, r) in out.column_iter_mut().zip(resid.column_iter()) {
                let n = r.norm();
                if n == 0.0 {
                    col.fill(0.0);
                } else {
                    col /= n;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{gmm_build, Prior};
    use crate::tweedie::moments;

    fn iso(d: usize, m: DVector<f64>, j: f64, c: f64) -> TweedieMoments {
        TweedieMoments { m, j: SymMatrix::scaled_identity(d, j), c: SymMatrix::scaled_identity(d, c) }
    }

    fn lvl(alpha: f64, v: f64) -> NoiseLevel {
        NoiseLevel { alpha, v }
    }

    #[test]
    fn parse_round_trip() {
        for s in ["none", "tmpd", "dtmpd", "dtmpd:rowsum", "dps", "dps-chung:0.15", "pigdm"] {
            let k: GuidanceKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert_eq!("dtmpd:diag".parse::<GuidanceKind>().unwrap(), GuidanceKind::Dtmpd(DiagMode::Exact));
        for bad in ["tmpd:1", "dps-chung", "dps-chung:-1", "dps-chung:x", "foo", "dtmpd:what"] {
            assert!(bad.parse::<GuidanceKind>().is_err(), "{bad}");
        }
    }

    #[test]
    fn scalar_observation_by_hand() {
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let h = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let mm = MeasurementModel::new(h, 0.3, DVector::from_element(1, 0.7), None).unwrap();
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let j = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let tm = TweedieMoments { m, j: SymMatrix::Dense(j), c: SymMatrix::Dense(c) };
        // hCh^T = 0.25*2 - 2*0.5*0.4 + 1 = 1.1; residual 0.7 - (0.5 - 2) = 2.2
        let scale = 2.2 / (1.1 + 0.09);
        let want = DVector::from_vec(vec![1.5 * 0.5 - 0.2, 0.2 * 0.5 - 0.8]) * scale;
        let f = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        assert!((f - want).norm() < 1e-14);
        // PiGDM with r^2 = 0.5: h h^T = 1.25
        let scale = 2.2 / (0.5 * 1.25 + 0.09);
        let want = DVector::from_vec(vec![1.5 * 0.5 - 0.2, 0.2 * 0.5 - 0.8]) * scale;
        let f = likelihood_score(GuidanceKind::Pigdm, &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        assert!((f - want).norm() < 1e-14);
    }

    #[test]
    fn zero_covariance_is_dps() {
        let mut rng = crate::rng::stream(1, &[]);
        let g = gmm_build(4).unwrap();
        let mm = crate::prior::generate_measurement(&g, 2, 0.2, &mut rng).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, -3.0, 0.5]);
        let l = lvl(0.6, 0.4);
        let mut tm = moments(&g.score(&x, l), &g.hessian(&x, l), &x, l).unwrap();
        tm.c = SymMatrix::scaled_identity(4, 0.0);
        let a = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, l).unwrap().vector;
        let b = likelihood_score_dps(&tm.m, &tm.j, &mm, GuidanceKind::Dps).unwrap();
        assert!((a - b).norm() < 1e-12);
        assert_eq!(bayes_update_mean(&tm, &mm).unwrap(), tm.m);
    }

    #[test]
    fn all_variants_vanish_on_consistent_data() {
        let m = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let y = &h * &m;
        let mm = MeasurementModel::new(h, 0.1, y, None).unwrap();
        let tm = iso(3, m, 0.9, 0.3);
        for k in ["tmpd", "dtmpd", "dtmpd:rowsum", "dps", "dps-chung:0.5", "pigdm"] {
            let f = likelihood_score(k.parse().unwrap(), &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
            assert_eq!(f.norm(), 0.0, "{k}");
        }
    }

    #[test]
    fn isotropic_variants_coincide() {
        // standard normal prior under VP: J = sqrt(alpha) I, C = v I = r^2 I
        let l = lvl(0.36, 0.64);
        let m = DVector::from_vec(vec![0.3, -1.2, 0.8, 2.0]);
        let h = DMatrix::from_row_slice(2, 4, &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5]);
        let mm = MeasurementModel::new(h, 0.4, DVector::from_vec(vec![1.0, 0.2]), None).unwrap();
        let tm = iso(4, m, l.alpha.sqrt(), l.v);
        let base = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, l).unwrap().vector;
        for k in ["dtmpd", "dtmpd:rowsum", "pigdm"] {
            let f = likelihood_score(k.parse().unwrap(), &tm, &mm, l).unwrap().vector;
            assert!((&f - &base).norm() <= 1e-10 * base.norm(), "{k}");
        }
    }

    #[test]
    fn rowsum_rejects_dense_rows() {
        let mm = MeasurementModel::new(DMatrix::from_element(1, 2, 1.0), 0.1, DVector::zeros(1), None).unwrap();
        let tm = iso(2, DVector::from_element(2, 1.0), 1.0, 1.0);
        let r = likelihood_score(GuidanceKind::Dtmpd(DiagMode::RowSum), &tm, &mm, lvl(0.5, 0.5));
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn diagonal_j_makes_exact_diag_lossless() {
        let d = DVector::from_vec(vec![0.5, 2.0, 1.0]);
        let tm = TweedieMoments {
            m: DVector::from_vec(vec![0.1, 0.2, 0.3]),
            j: SymMatrix::Dense(DMatrix::from_diagonal(&d)),
            c: SymMatrix::Dense(DMatrix::from_diagonal(&(&d * 0.3))),
        };
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 1.0]);
        let mm = MeasurementModel::new(h, 0.2, DVector::from_vec(vec![1.0, 0.0]), None).unwrap();
        let a = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        let b = likelihood_score(GuidanceKind::Dtmpd(DiagMode::Exact), &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn bayes_update_cases() {
        let m = DVector::from_vec(vec![1.0, 3.0]);
        let y = DVector::from_vec(vec![-1.0, 5.0]);
        let mm = MeasurementModel::new(DMatrix::identity(2, 2), 1.0, y.clone(), None).unwrap();
        let tm = iso(2, m.clone(), 1.0, 1.0);
        assert!((bayes_update_mean(&tm, &mm).unwrap() - (m + y) / 2.0).norm() < 1e-14);
    }

    #[test]
    fn bayes_update_matches_conjugate_formula() {
        let mut rng = crate::rng::stream(6, &[]);
        let a = crate::prior::standard_normal_matrix(5, 5, &mut rng);
        let c = &a * a.transpose() + DMatrix::identity(5, 5) * 0.1;
        let m = crate::prior::standard_normal_matrix(5, 1, &mut rng).column(0).into_owned();
        let h = crate::prior::standard_normal_matrix(3, 5, &mut rng);
        let y = crate::prior::standard_normal_matrix(3, 1, &mut rng).column(0).into_owned();
        let s2 = 0.25f64;
        let mm = MeasurementModel::new(h.clone(), s2.sqrt(), y.clone(), None).unwrap();
        let tm = TweedieMoments { m: m.clone(), j: SymMatrix::Dense(c.clone()), c: SymMatrix::Dense(c.clone()) };
        let got = bayes_update_mean(&tm, &mm).unwrap();
        // information form: (C^-1 + H^T H / s2)^-1 (C^-1 m + H^T y / s2)
        let ci = c.try_inverse().unwrap();
        let p = (&ci + h.transpose() * &h / s2).try_inverse().unwrap();
        let want = p * (&ci * &m + h.transpose() * &y / s2);
        assert!((&got - &want).norm() / want.norm() < 1e-10);
    }

    #[test]
    fn small_noise_behaviour() {
        let m = DVector::from_vec(vec![0.0, 0.0]);
        let mm = MeasurementModel::new(DMatrix::identity(2, 2), 1e-6, DVector::from_vec(vec![1.0, 1.0]), None).unwrap();
        let tm = iso(2, m, 1.0, 0.5);
        let f = likelihood_score(GuidanceKind::Tmpd, &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        assert!(f.iter().all(|x| x.is_finite()) && f.norm() < 3.0);
        let big = MeasurementModel::new(DMatrix::identity(2, 2), 1e8, DVector::from_vec(vec![1.0, 1.0]), None).unwrap();
        let f = likelihood_score(GuidanceKind::Pigdm, &tm, &big, lvl(0.5, 0.5)).unwrap().vector;
        assert!(f.norm() < 1e-15);
        // DPS scales as 1/sigma^2
        let d1 = likelihood_score(GuidanceKind::Dps, &tm, &mm, lvl(0.5, 0.5)).unwrap().vector;
        let mm2 = MeasurementModel::new(DMatrix::identity(2, 2), 2e-6, mm.y.clone(), None).unwrap();
        let d2 = likelihood_score(GuidanceKind::Dps, &tm, &mm2, lvl(0.5, 0.5)).unwrap().vector;
        assert!((d1.norm() / d2.norm() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn gain_matches_pointwise() {
        let mut rng = crate::rng::stream(2, &[]);
        let a = crate::prior::standard_normal_matrix(4, 4, &mut rng);
        let c = &a * a.transpose();
        let j = &c * 1.7;
        let m = DVector::from_vec(vec![1.0, 0.5, -0.5, 2.0]);
        let mm = crate::prior::generate_measurement(&gmm_build(4).unwrap(), 2, 0.1, &mut rng).unwrap();
        let tm = TweedieMoments { m: m.clone(), j: SymMatrix::Dense(j), c: SymMatrix::Dense(c) };
        let resid = DMatrix::from_column_slice(2, 1, (&mm.y - &mm.h * &m).as_slice());
        for k in ["tmpd", "dtmpd", "dps", "dps-chung:0.3", "pigdm"] {
            let kind: GuidanceKind = k.parse().unwrap();
            let f = likelihood_score(kind, &tm, &mm, lvl(0.3, 0.7)).unwrap().vector;
            let g = GuidanceGain::new(kind, &tm, &mm, lvl(0.3, 0.7)).unwrap().apply(&resid);
            assert!((g.column(0) - &f).norm() <= 1e-10 * f.norm().max(1.0), "{k}");
        }
    }
}
