//! Reverse-time samplers: Euler-Maruyama on the guided reverse SDE and DDPM
//! ancestral sampling with a Bayes-updated denoiser.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, shape, Error, Result};
use crate::guidance::{likelihood_score, GuidanceGain, GuidanceKind};
use crate::linalg::Fallback;
use crate::prior::{MeasurementModel, Prior};
use crate::rng::{stream, Rng};
use crate::schedule::{DiscreteSchedule, NoiseLevel, Schedule, SdeKind};
use crate::tweedie::{mean_batch, moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerMethod {
    EmVp,
    EmVe,
    DdpmVp,
    DdpmVe,
}

impl SamplerMethod {
    pub fn sde(&self) -> SdeKind {
        match self {
            SamplerMethod::EmVp | SamplerMethod::DdpmVp => SdeKind::Vp,
            SamplerMethod::EmVe | SamplerMethod::DdpmVe => SdeKind::Ve,
        }
    }

    pub fn is_ancestral(&self) -> bool {
        matches!(self, SamplerMethod::DdpmVp | SamplerMethod::DdpmVe)
    }
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMethod::EmVp => "em-vp",
            SamplerMethod::EmVe => "em-ve",
            SamplerMethod::DdpmVp => "ddpm-vp",
            SamplerMethod::DdpmVe => "ddpm-ve",
        })
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "em-vp" => Ok(SamplerMethod::EmVp),
            "em-ve" => Ok(SamplerMethod::EmVe),
            "ddpm-vp" => Ok(SamplerMethod::DdpmVp),
            "ddpm-ve" => Ok(SamplerMethod::DdpmVe),
            _ => Err(invalid(format!("unknown sampler '{s}' (expected em-vp, em-ve, ddpm-vp or ddpm-ve)"))),
        }
    }
}

impl Serialize for SamplerMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SamplerMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub guidance: GuidanceKind,
    /// Record per-step guidance norms (fallback counts are always kept).
    #[serde(default)]
    pub diagnostics: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid("sampler needs at least 2 steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// Mean over chains of the guidance norm.
    pub guidance_norm: f64,
    /// Chains whose linear solve needed a ridge or eigenvalue clamp.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: Vec<StepDiagnostics>,
}

impl Diagnostics {
    pub fn total_fallbacks(&self) -> usize {
        self.steps.iter().map(|s| s.fallbacks).sum()
    }
}

/// Final samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

/// One reverse step written as
/// x' = ax x + bs s + cm m + gf f + noise z.
#[derive(Debug, Clone, Copy)]
struct Step {
    index: usize,
    t: f64,
    level: NoiseLevel,
    ax: f64,
    bs: f64,
    cm: f64,
    gf: f64,
    noise: f64,
}

fn is_shift(kind: GuidanceKind) -> bool {
    matches!(kind, GuidanceKind::DpsChung { .. })
}

fn em_steps(schedule: &Schedule, cfg: &SamplerConfig) -> Result<Vec<Step>> {
    let (horizon, eps) = (schedule.horizon(), schedule.eps());
    let h = (horizon - eps) / cfg.steps as f64;
    (0..cfg.steps)
        .map(|k| {
            let t = horizon - k as f64 * h;
            let level = schedule.level(t)?;
            let rate = schedule.rate(t) * h;
            let ax = match schedule.kind() {
                SdeKind::Vp => 1.0 + 0.5 * rate,
                SdeKind::Ve => 1.0,
            };
            let gf = if is_shift(cfg.guidance) { 1.0 } else { rate };
            Ok(Step { index: cfg.steps - k, t, level, ax, bs: rate, cm: 0.0, gf, noise: rate.sqrt() })
        })
        .collect()
}

fn ddpm_steps(ds: &DiscreteSchedule, cfg: &SamplerConfig) -> Result<Vec<Step>> {
    let n_steps = ds.steps();
    (1..=n_steps)
        .rev()
        .map(|n| {
            let level = ds.level(n)?;
            let (ax, cm) = match ds.kind {
                SdeKind::Vp => (
                    (1.0 - ds.beta[n]).sqrt() * ds.v[n - 1] / ds.v[n],
                    ds.alpha[n - 1].sqrt() * ds.beta[n] / ds.v[n],
                ),
                SdeKind::Ve => (ds.v[n - 1] / ds.v[n], (ds.v[n] - ds.v[n - 1]) / ds.v[n]),
            };
            // score-type guidance enters through m^y = m + (v / sqrt(alpha)) f
            let gf = if is_shift(cfg.guidance) { 1.0 } else { cm * level.v / level.sqrt_alpha() };
            let noise = if n == 1 { 0.0 } else { ds.sigma[n] };
            Ok(Step { index: n, t: ds.t[n], level, ax, bs: 0.0, cm, gf, noise })
        })
        .collect()
}

fn initial_std(kind: SdeKind, level: NoiseLevel) -> f64 {
    match kind {
        SdeKind::Vp => 1.0,
        SdeKind::Ve => level.v.sqrt(),
    }
}

fn fill_normal(buf: &mut [f64], rng: &mut Rng) {
    for b in buf.iter_mut() {
        *b = StandardNormal.sample(rng);
    }
}

fn apply_step(step: &Step, x: &mut [f64], s: &[f64], m: &[f64], f: &[f64], z: &[f64]) {
    for i in 0..x.len() {
        let mut nx = step.ax * x[i] + step.gf * f[i];
        if step.bs != 0.0 {
            nx += step.bs * s[i];
        }
        if step.cm != 0.0 {
            nx += step.cm * m[i];
        }
        if step.noise != 0.0 {
            nx += step.noise * z[i];
        }
        x[i] = nx;
    }
}

fn check_inputs(prior: &dyn Prior, mm: &MeasurementModel, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if prior.dim() != mm.d_x() {
        return Err(shape(format!("prior dimension {} but measurement acts on {}", prior.dim(), mm.d_x())));
    }
    Ok(())
}

fn run_steps(prior: &dyn Prior, mm: &MeasurementModel, cfg: &SamplerConfig, steps: &[Step], kind: SdeKind) -> Result<Trajectory> {
    let start = initial_std(kind, steps[0].level);
    let context = |step: usize| Error::NonFinite { step, context: format!("{} with {} guidance", cfg.method, cfg.guidance) };
    if prior.constant_hessian() {
        run_batched(prior, mm, cfg, steps, start, &context)
    } else {
        run_chains(prior, mm, cfg, steps, start, &context)
    }
}

/// Chains advance independently; each step evaluates the state-dependent
/// Hessian of the chain.
fn run_chains(
    prior: &dyn Prior,
    mm: &MeasurementModel,
    cfg: &SamplerConfig,
    steps: &[Step],
    start: f64,
    context: &(dyn Fn(usize) -> Error + Sync),
) -> Result<Trajectory> {
    let d = prior.dim();
    let chains: Vec<Result<(DVector<f64>, Vec<(f64, bool)>)>> = (0..cfg.batch)
        .into_par_iter()
        .map(|chain| {
            let mut rng = stream(cfg.seed, &[chain as u64]);
            let mut x = DVector::zeros(d);
            fill_normal(x.as_mut_slice(), &mut rng);
            x *= start;
            let mut z = DVector::zeros(d);
            let mut record = Vec::with_capacity(steps.len());
            for step in steps {
                let (s, m, f, fb) = if cfg.guidance == GuidanceKind::None {
                    let s = prior.score(&x, step.level);
                    let m = (&x + &s * step.level.v) / step.level.sqrt_alpha();
                    (s, m, DVector::zeros(d), Fallback::None)
                } else {
                    let (s, hess) = prior.score_and_hessian(&x, step.level);
                    let tm = moments(&s, &hess, &x, step.level)?;
                    let g = likelihood_score(cfg.guidance, &tm, mm, step.level)?;
                    (s, tm.m, g.vector, g.fallback)
                };
                if step.noise != 0.0 {
                    fill_normal(z.as_mut_slice(), &mut rng);
                }
                apply_step(step, x.as_mut_slice(), s.as_slice(), m.as_slice(), f.as_slice(), z.as_slice());
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(context(step.index));
                }
                record.push((if cfg.diagnostics { f.norm() } else { 0.0 }, fb != Fallback::None));
            }
            Ok((x, record))
        })
        .collect();

    let mut samples = DMatrix::zeros(cfg.batch, d);
    let mut diag: Vec<StepDiagnostics> =
        steps.iter().map(|s| StepDiagnostics { step: s.index, t: s.t, guidance_norm: 0.0, fallbacks: 0 }).collect();
    for (i, chain) in chains.into_iter().enumerate() {
        let (x, record) = chain?;
        samples.set_row(i, &x.transpose());
        for (sd, (norm, fb)) in diag.iter_mut().zip(record) {
            sd.guidance_norm += norm;
            sd.fallbacks += fb as usize;
        }
    }
    let denom = cfg.batch.max(1) as f64;
    diag.iter_mut().for_each(|s| s.guidance_norm /= denom);
    Ok(Trajectory { samples, diagnostics: Diagnostics { steps: diag } })
}

/// All chains advance together. With a constant Hessian the score is affine,
/// s(x) = s(0) + Hess x, so unless the guidance is normalised per chain the
/// whole step is x' = T x + shift + noise with T built once per step.
fn run_batched(
    prior: &dyn Prior,
    mm: &MeasurementModel,
    cfg: &SamplerConfig,
    steps: &[Step],
    start: f64,
    context: &(dyn Fn(usize) -> Error + Sync),
) -> Result<Trajectory> {
    let (d, b) = (prior.dim(), cfg.batch);
    let mut rngs: Vec<Rng> = (0..b).map(|c| stream(cfg.seed, &[c as u64])).collect();
    let mut x = DMatrix::zeros(d, b);
    for (mut col, rng) in x.column_iter_mut().zip(rngs.iter_mut()) {
        fill_normal(col.as_mut_slice(), rng);
        col *= start;
    }
    let mut z = DMatrix::zeros(d, b);
    let zero = DVector::zeros(d);
    let mut diag = Vec::with_capacity(steps.len());
    for step in steps {
        let level = step.level;
        let (s0, hess) = prior.score_and_hessian(&zero, level);
        let tm = moments(&s0, &hess, &zero, level)?;
        let gain = GuidanceGain::new(cfg.guidance, &tm, mm, level)?;
        let mut norm = 0.0;
        let next = if gain.normalize {
            let s = prior.score_batch(&x, level);
            let m = mean_batch(&x, &s, level);
            let resid = residuals(mm, &m);
            let f = gain.apply(&resid);
            norm = mean_col_norm(&f);
            draw_noise(step, &mut z, &mut rngs);
            let mut next = x.clone();
            apply_step(step, next.as_mut_slice(), s.as_slice(), m.as_slice(), f.as_slice(), z.as_slice());
            next
        } else {
            let j = tm.j.to_dense();
            let hj = &mm.h * &j;
            let g = &gain.gain * step.gf;
            let mut t = hess.to_dense() * step.bs + &j * step.cm - &g * &hj;
            for i in 0..d {
                t[(i, i)] += step.ax;
            }
            // tm.m is the Tweedie mean of the zero state
            let shift = &s0 * step.bs + &tm.m * step.cm + &g * (&mm.y - &mm.h * &tm.m);
            if cfg.diagnostics {
                let mut resid = -(&hj * &x);
                for mut col in resid.column_iter_mut() {
                    col += &mm.y - &mm.h * &tm.m;
                }
                norm = mean_col_norm(&gain.apply(&resid));
            }
            draw_noise(step, &mut z, &mut rngs);
            let mut next = t * &x;
            for (mut col, zc) in next.column_iter_mut().zip(z.column_iter()) {
                col += &shift;
                if step.noise != 0.0 {
                    col.axpy(step.noise, &zc, 1.0);
                }
            }
            next
        };
        x = next;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(context(step.index));
        }
        let fallbacks = if gain.fallback == Fallback::None { 0 } else { b };
        diag.push(StepDiagnostics { step: step.index, t: step.t, guidance_norm: norm, fallbacks });
    }
    Ok(Trajectory { samples: x.transpose(), diagnostics: Diagnostics { steps: diag } })
}

fn residuals(mm: &MeasurementModel, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut resid = -(&mm.h * m);
    for mut col in resid.column_iter_mut() {
        col += &mm.y;
    }
    resid
}

fn mean_col_norm(f: &DMatrix<f64>) -> f64 {
    f.column_iter().map(|c| c.norm()).sum::<f64>() / f.ncols().max(1) as f64
}

fn draw_noise(step: &Step, z: &mut DMatrix<f64>, rngs: &mut [Rng]) {
    if step.noise != 0.0 {
        for (mut col, rng) in z.column_iter_mut().zip(rngs.iter_mut()) {
            fill_normal(col.as_mut_slice(), rng);
        }
    }
}

/// Euler-Maruyama integration of the guided reverse SDE from T down to eps.
pub fn em_reverse(prior: &dyn Prior, mm: &MeasurementModel, schedule: &Schedule, cfg: &SamplerConfig) -> Result<Trajectory> {
    check_inputs(prior, mm, cfg)?;
    if cfg.method.is_ancestral() || cfg.method.sde() != schedule.kind() {
        return Err(invalid(format!("sampler '{}' does not match an Euler-Maruyama run on a {:?} schedule", cfg.method, schedule.kind())));
    }
    let steps = em_steps(schedule, cfg)?;
    run_steps(prior, mm, cfg, &steps, schedule.kind())
}

/// DDPM ancestral sampling; the last step (to index 0) adds no noise.
pub fn ddpm_ancestral(prior: &dyn Prior, mm: &MeasurementModel, ds: &DiscreteSchedule, cfg: &SamplerConfig) -> Result<Trajectory> {
    check_inputs(prior, mm, cfg)?;
    if !cfg.method.is_ancestral() || cfg.method.sde() != ds.kind {
        return Err(invalid(format!("sampler '{}' does not match an ancestral run on a {:?} grid", cfg.method, ds.kind)));
    }
    let steps = ddpm_steps(ds, cfg)?;
    run_steps(prior, mm, cfg, &steps, ds.kind)
}

/// Dispatch on `cfg.method`; ancestral methods discretise `schedule` with `cfg.steps`.
pub fn sample(prior: &dyn Prior, mm: &MeasurementModel, schedule: &Schedule, cfg: &SamplerConfig) -> Result<Trajectory> {
    if cfg.method.is_ancestral() {
        ddpm_ancestral(prior, mm, &schedule.discretize(cfg.steps)?, cfg)
    } else {
        em_reverse(prior, mm, schedule, cfg)
    }
}

pub struct SampleJob<'a> {
    pub prior: &'a dyn Prior,
    pub mm: &'a MeasurementModel,
    pub schedule: Schedule,
    pub cfg: SamplerConfig,
}

/// Run independent jobs on `workers` threads. Failures stay with their job.
pub fn batch_run(jobs: &[SampleJob<'_>], workers: usize) -> Vec<Result<Trajectory>> {
    if jobs.is_empty() {
        return Vec::new();
    }
    let run = || jobs.par_iter().map(|j| sample(j.prior, j.mm, &j.schedule, &j.cfg)).collect();
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{gmm_build, GaussianPrior};
    use crate::schedule::{VeSchedule, VpSchedule};

    fn cfg(method: SamplerMethod, guidance: &str, steps: usize, batch: usize) -> SamplerConfig {
        SamplerConfig { method, steps, batch, seed: 17, guidance: guidance.parse().unwrap(), diagnostics: true }
    }

    fn normal(d: usize) -> GaussianPrior {
        GaussianPrior::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap()
    }

    fn obs(d: usize) -> MeasurementModel {
        let mut h = DMatrix::zeros(1, d);
        h[(0, 0)] = 1.0;
        MeasurementModel::new(h, 0.5, DVector::from_element(1, 1.0), None).unwrap()
    }

    #[test]
    fn method_strings() {
        for s in ["em-vp", "em-ve", "ddpm-vp", "ddpm-ve"] {
            assert_eq!(s.parse::<SamplerMethod>().unwrap().to_string(), s);
        }
        assert!("euler".parse::<SamplerMethod>().is_err());
    }

    #[test]
    fn two_step_smoke() {
        let p = normal(2);
        let mm = obs(2);
        for (m, s) in [
            (SamplerMethod::EmVp, Schedule::Vp(VpSchedule::default())),
            (SamplerMethod::EmVe, Schedule::Ve(VeSchedule::default())),
            (SamplerMethod::DdpmVp, Schedule::Vp(VpSchedule::default())),
            (SamplerMethod::DdpmVe, Schedule::Ve(VeSchedule::default())),
        ] {
            let t = sample(&p, &mm, &s, &cfg(m, "tmpd", 2, 3)).unwrap();
            assert_eq!(t.samples.shape(), (3, 2));
            assert!(t.samples.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = normal(2);
        let vp = Schedule::Vp(VpSchedule::default());
        assert!(em_reverse(&p, &obs(3), &vp, &cfg(SamplerMethod::EmVp, "tmpd", 10, 1)).is_err());
        assert!(em_reverse(&p, &obs(2), &vp, &cfg(SamplerMethod::EmVe, "tmpd", 10, 1)).is_err());
        assert!(em_reverse(&p, &obs(2), &vp, &cfg(SamplerMethod::EmVp, "tmpd", 1, 1)).is_err());
        let ds = vp.discretize(10).unwrap();
        assert!(ddpm_ancestral(&p, &obs(2), &ds, &cfg(SamplerMethod::EmVp, "tmpd", 10, 1)).is_err());
    }

    #[test]
    fn ddpm_gaussian_posterior_moments() {
        // N(0, I) prior, observe x_1 with sigma 0.5: posterior x_1 ~ N(0.8, 0.2), x_2 ~ N(0, 1)
        let p = normal(2);
        let mm = obs(2);
        let t = sample(&p, &mm, &Schedule::Vp(VpSchedule::default()), &cfg(SamplerMethod::DdpmVp, "tmpd", 1000, 1000)).unwrap();
        let (m, c) = crate::metrics::empirical_moments(&t.samples).unwrap();
        let se = |var: f64| 3.0 * (var / 1000.0f64).sqrt();
        assert!((m[0] - 0.8).abs() < se(0.2), "{m}");
        assert!(m[1].abs() < se(1.0), "{m}");
        // variance of a sample variance: 2 var^2 / (n - 1)
        assert!((c[(0, 0)] - 0.2).abs() < 3.0 * (2.0 * 0.04 / 999.0f64).sqrt() + 0.01, "{c}");
        assert!((c[(1, 1)] - 1.0).abs() < 3.0 * (2.0 / 999.0f64).sqrt() + 0.02, "{c}");
    }

    #[test]
    fn chain_and_batched_paths_agree() {
        // an isotropic GMM with one component has a constant Hessian but goes
        // through the per-chain path
        let g = crate::prior::GmmPrior::new(DMatrix::zeros(3, 1), DVector::from_element(1, 1.0), 1.0).unwrap();
        let n = normal(3);
        let mut h = DMatrix::zeros(2, 3);
        h[(0, 0)] = 1.0;
        h[(1, 2)] = 0.5;
        let mm = MeasurementModel::new(h, 0.3, DVector::from_vec(vec![0.5, -1.0]), None).unwrap();
        let vp = Schedule::Vp(VpSchedule::default());
        for guidance in ["tmpd", "dps-chung:0.5", "pigdm", "none"] {
            for m in [SamplerMethod::EmVp, SamplerMethod::DdpmVp] {
                let c = cfg(m, guidance, 50, 4);
                let a = sample(&g, &mm, &vp, &c).unwrap();
                let b = sample(&n, &mm, &vp, &c).unwrap();
                assert!((&a.samples - &b.samples).amax() < 1e-9, "{guidance} {m}");
                for (sa, sb) in a.diagnostics.steps.iter().zip(&b.diagnostics.steps) {
                    assert!((sa.guidance_norm - sb.guidance_norm).abs() < 1e-9 * sa.guidance_norm.max(1.0));
                }
            }
        }
    }

    #[test]
    fn batch_run_is_deterministic_and_isolates_failures() {
        let g = gmm_build(8).unwrap();
        let mut rng = stream(1, &[]);
        let mm = crate::prior::generate_measurement(&g, 2, 0.1, &mut rng).unwrap();
        let bad = obs(3);
        let vp = Schedule::Vp(VpSchedule::new(0.1, 500.0, 1.0).unwrap());
        let jobs = vec![
            SampleJob { prior: &g, mm: &mm, schedule: vp, cfg: cfg(SamplerMethod::DdpmVp, "tmpd", 20, 8) },
            SampleJob { prior: &g, mm: &bad, schedule: vp, cfg: cfg(SamplerMethod::DdpmVp, "tmpd", 20, 8) },
            SampleJob { prior: &g, mm: &mm, schedule: vp, cfg: cfg(SamplerMethod::EmVp, "dps", 20, 8) },
        ];
        let one = batch_run(&jobs, 1);
        let four = batch_run(&jobs, 4);
        assert!(one[1].is_err() && four[1].is_err());
        for i in [0, 2] {
            let (a, b) = (one[i].as_ref().unwrap(), four[i].as_ref().unwrap());
            assert_eq!(a.samples.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.samples.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        assert!(batch_run(&[], 2).is_empty());
    }
}
