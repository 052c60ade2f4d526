//! Forward noise schedules (VP and VE) and their discretisations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Fraction of the horizon clipped off the time origin.
pub const EPS_FRACTION: f64 = 1e-3;

/// Signal scale and noise variance of the forward marginal,
/// `x_t = sqrt(alpha) x_0 + sqrt(v) z`. VE schedules have `alpha == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub alpha: f64,
    pub v: f64,
}

impl NoiseLevel {
    pub fn new(alpha: f64, v: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || !alpha.is_normal() {
            return Err(invalid(format!("signal scale alpha = {alpha:e} underflowed or out of (0, 1]")));
        }
        if !(v >= 0.0) || !v.is_finite() {
            return Err(invalid(format!("noise variance v = {v:e} must be finite and nonnegative")));
        }
        Ok(Self { alpha, v })
    }

    pub fn sqrt_alpha(&self) -> f64 {
        self.alpha.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Vp,
    Ve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let s = Self { beta_min, beta_max, horizon };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(invalid("VP schedule needs 0 < beta_min <= beta_max < inf"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        Ok(())
    }

    /// Instantaneous rate beta(t), linear in t/T.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
    }

    /// Integral of beta over [0, t].
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_domain(t, self.horizon)?;
        Ok((-self.integrated_beta(t)).exp())
    }

    /// `1 - alpha`, computed without cancellation near t = 0.
    pub fn v(&self, t: f64) -> Result<f64> {
        check_domain(t, self.horizon)?;
        Ok(-(-self.integrated_beta(t)).exp_m1())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

impl Default for VeSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.01, sigma_max: 50.0, horizon: 1.0 }
    }
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        let s = Self { sigma_min, sigma_max, horizon };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(invalid("VE schedule needs 0 < sigma_min < sigma_max < inf"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// v(t) = sigma_min^2 ((sigma_max/sigma_min)^(2t/T) - 1).
    pub fn v(&self, t: f64) -> Result<f64> {
        check_domain(t, self.horizon)?;
        Ok(self.sigma_min.powi(2) * (2.0 * t / self.horizon * self.log_ratio()).exp_m1())
    }

    /// dv/dt.
    pub fn rate(&self, t: f64) -> f64 {
        let k = 2.0 * self.log_ratio() / self.horizon;
        self.sigma_min.powi(2) * k * (k * t).exp()
    }
}

fn check_domain(t: f64, horizon: f64) -> Result<()> {
    if t >= 0.0 && t <= horizon {
        Ok(())
    } else {
        Err(Error::Domain { t, horizon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Vp(VpSchedule),
    Ve(VeSchedule),
}

impl Schedule {
    pub fn kind(&self) -> SdeKind {
        match self {
            Schedule::Vp(_) => SdeKind::Vp,
            Schedule::Ve(_) => SdeKind::Ve,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Schedule::Vp(s) => s.horizon,
            Schedule::Ve(s) => s.horizon,
        }
    }

    pub fn eps(&self) -> f64 {
        EPS_FRACTION * self.horizon()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Vp(s) => s.validate(),
            Schedule::Ve(s) => s.validate(),
        }
    }

    pub fn level(&self, t: f64) -> Result<NoiseLevel> {
        match self {
            Schedule::Vp(s) => NoiseLevel::new(s.alpha(t)?, s.v(t)?),
            Schedule::Ve(s) => NoiseLevel::new(1.0, s.v(t)?),
        }
    }

    /// Diffusion rate of the forward SDE: beta(t) for VP, dv/dt for VE.
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Schedule::Vp(s) => s.beta(t),
            Schedule::Ve(s) => s.rate(t),
        }
    }

    pub fn discretize(&self, n: usize) -> Result<DiscreteSchedule> {
        discretize(self, n)
    }
}

impl From<VpSchedule> for Schedule {
    fn from(s: VpSchedule) -> Self {
        Schedule::Vp(s)
    }
}

impl From<VeSchedule> for Schedule {
    fn from(s: VeSchedule) -> Self {
        Schedule::Ve(s)
    }
}

/// Discrete grid with `steps + 1` entries. Index 0 is clean data (t = 0,
/// alpha = 1, v = 0); indices 1..=steps sit on a uniform grid over [eps, T].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    pub kind: SdeKind,
    pub t: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub const BETA_MAX_CLAMP: f64 = 0.999;
const BETA_MIN_CLAMP: f64 = 1e-300;

impl DiscreteSchedule {
    pub fn steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn level(&self, n: usize) -> Result<NoiseLevel> {
        NoiseLevel::new(self.alpha[n], self.v[n])
    }
}

pub fn discretize(schedule: &Schedule, n: usize) -> Result<DiscreteSchedule> {
    if n < 2 {
        return Err(invalid("discretize needs at least 2 steps"));
    }
    schedule.validate()?;
    let horizon = schedule.horizon();
    let eps = schedule.eps();
    let mut t = Vec::with_capacity(n + 1);
    t.push(0.0);
    for i in 0..n {
        t.push(eps + (horizon - eps) * i as f64 / (n - 1) as f64);
    }
    t[n] = horizon;

    let mut beta = vec![0.0; n + 1];
    let mut alpha = vec![1.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut sigma = vec![0.0; n + 1];

    match schedule {
        Schedule::Vp(s) => {
            let mut log_alpha = 0.0;
            for k in 1..=n {
                let dint = s.integrated_beta(t[k]) - s.integrated_beta(t[k - 1]);
                let b = (-(-dint).exp_m1()).clamp(BETA_MIN_CLAMP, BETA_MAX_CLAMP);
                beta[k] = b;
                log_alpha += (-b).ln_1p();
                alpha[k] = log_alpha.exp();
                v[k] = -log_alpha.exp_m1();
            }
        }
        Schedule::Ve(s) => {
            for k in 1..=n {
                v[k] = s.v(t[k])?;
                beta[k] = (v[k] - v[k - 1]) / (1.0 + v[k]);
            }
        }
    }
    for k in 1..=n {
        sigma[k] = match schedule.kind() {
            SdeKind::Vp => (v[k - 1] * beta[k] / v[k]).sqrt(),
            SdeKind::Ve => (v[k - 1] * (v[k] - v[k - 1]) / v[k]).sqrt(),
        };
    }
    Ok(DiscreteSchedule { kind: schedule.kind(), t, beta, alpha, v, sigma })
}
