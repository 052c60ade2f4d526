//! Synthetic experiment sweeps: GMM sliced-W1 tables and GRF W2 curves.

pub mod config;
pub mod report;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::{Experiment, ExperimentConfig, GrfConfig, MethodSpec};
pub use report::{aggregate, emit_report, Aggregate, Curve, ExperimentReport, Format, Outcome, Record, Timing};

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{empirical_moments, gaussian_w2, sliced_w1, SlicedWassersteinConfig};
use crate::prior::{generate_mask_measurement, generate_measurement, gmm_build, grf_build, GaussianPrior, GmmPrior, MeasurementModel, Prior};
use crate::rng::{derive, stream};
use crate::sampler::{sample, SamplerConfig, Trajectory};

pub const WORKERS_ENV: &str = "TMPD_WORKERS";

// Stream tags under a model seed.
const TAG_MEASUREMENT: u64 = 0;
const TAG_EXACT: u64 = 1;
const TAG_FLOOR: u64 = 2;
const TAG_METHOD: u64 = 3;
const TAG_METRIC: u64 = 4;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Where per-run samples and diagnostics go when the config asks for them.
    pub artifacts: Option<PathBuf>,
}

/// Worker count from the environment, else the number of CPUs.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&w: &usize| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Seed for one measurement model; depends on the cell values, not list order.
pub fn model_seed(seed: u64, d_x: usize, d_y: usize, sigma_y: f64, model: usize) -> u64 {
    derive(seed, &[d_x as u64, d_y as u64, sigma_y.to_bits(), model as u64])
}

fn method_seed(model_seed: u64, name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    derive(model_seed, &[TAG_METHOD, u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))])
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| Error::Config(e.to_string()))
}

fn failed(e: &Error) -> String {
    format!("failed: {e}")
}

fn cell_tag(d_x: usize, d_y: usize, sigma_y: f64, model: usize) -> String {
    format!("dx{d_x}_dy{d_y}_s{sigma_y}_m{model}")
}

fn sampler_cfg(cfg: &ExperimentConfig, m: &MethodSpec, batch: usize, seed: u64) -> SamplerConfig {
    SamplerConfig { method: m.sampler, steps: cfg.steps, batch, seed, guidance: m.guidance, diagnostics: cfg.diagnostics }
}

fn save_run(opts: &RunOptions, cfg: &ExperimentConfig, tag: &str, name: &str, tr: &Trajectory) -> Result<()> {
    let Some(dir) = &opts.artifacts else { return Ok(()) };
    let stem = format!("{tag}_{}", report::sanitize(name));
    if cfg.save_samples {
        io::write_samples_csv(&dir.join("samples").join(format!("{stem}.csv")), &tr.samples)?;
    }
    if cfg.diagnostics {
        io::write_json(&dir.join("diagnostics").join(format!("{stem}.json")), &tr.diagnostics)?;
    }
    Ok(())
}

fn run_method(
    prior: &dyn Prior,
    mm: &MeasurementModel,
    cfg: &ExperimentConfig,
    m: &MethodSpec,
    batch: usize,
    seed: u64,
    opts: &RunOptions,
    tag: &str,
) -> Result<DMatrix<f64>> {
    let tr = sample(prior, mm, &cfg.schedule_for(m.sampler), &sampler_cfg(cfg, m, batch, seed))?;
    save_run(opts, cfg, tag, &m.name(), &tr)?;
    Ok(tr.samples)
}

struct Unit {
    d_x: usize,
    d_y: usize,
    sigma_y: f64,
    model: usize,
    seed: u64,
}

fn units(cfg: &ExperimentConfig) -> Vec<Unit> {
    let mut out = vec![];
    for (d_x, d_y, sigma_y) in cfg.cells() {
        for model in 0..cfg.n_models {
            out.push(Unit { d_x, d_y, sigma_y, model, seed: model_seed(cfg.seed, d_x, d_y, sigma_y, model) });
        }
    }
    out
}

struct GmmSetup {
    mm: MeasurementModel,
    exact: DMatrix<f64>,
    floor: f64,
}

fn gmm_setup(prior: &GmmPrior, u: &Unit, cfg: &ExperimentConfig, sw: &SlicedWassersteinConfig) -> Result<GmmSetup> {
    let mm = generate_measurement(prior, u.d_y, u.sigma_y, &mut stream(u.seed, &[TAG_MEASUREMENT]))?;
    let post = prior.exact_posterior(&mm)?;
    let exact = post.sample(cfg.n_samples, &mut stream(u.seed, &[TAG_EXACT]))?;
    let second = post.sample(cfg.n_samples, &mut stream(u.seed, &[TAG_FLOOR]))?;
    let floor = sliced_w1(&exact, &second, sw)?;
    Ok(GmmSetup { mm, exact, floor })
}

/// Per cell and model: draw a measurement, sample the exact posterior and
/// every method, and score each method by sliced W1 against the exact draws.
pub fn run_gmm(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(ExperimentReport, Outcome)> {
    cfg.validate()?;
    if cfg.experiment != Experiment::Gmm {
        return Err(Error::Config("run_gmm needs experiment = \"gmm\"".into()));
    }
    let mut priors: HashMap<usize, GmmPrior> = HashMap::new();
    for &d in &cfg.d_x {
        priors.insert(d, gmm_build(d)?);
    }
    let units = units(cfg);
    let sw = SlicedWassersteinConfig { n_slices: cfg.n_slices, seed: derive(cfg.seed, &[TAG_METRIC]) };
    let pool = pool(opts.workers)?;

    let setups: Vec<Result<GmmSetup>> = pool.install(|| units.par_iter().map(|u| gmm_setup(&priors[&u.d_x], u, cfg, &sw)).collect());
    let tasks: Vec<(usize, usize)> = (0..units.len()).flat_map(|u| (0..cfg.methods.len()).map(move |m| (u, m))).collect();
    let results: Vec<(Result<f64>, f64)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ui, mi)| {
                let u = &units[ui];
                let m = &cfg.methods[mi];
                let start = Instant::now();
                let res = match &setups[ui] {
                    Err(e) => Err(Error::Unsupported(format!("setup: {e}"))),
                    Ok(s) => {
                        let tag = cell_tag(u.d_x, u.d_y, u.sigma_y, u.model);
                        run_method(&priors[&u.d_x], &s.mm, cfg, m, cfg.n_samples, method_seed(u.seed, &m.name()), opts, &tag)
                            .and_then(|x| sliced_w1(&x, &s.exact, &sw))
                    }
                };
                (res, start.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut records = Vec::with_capacity(tasks.len());
    let mut timings = Vec::with_capacity(tasks.len());
    for (&(ui, mi), (res, secs)) in tasks.iter().zip(results) {
        let u = &units[ui];
        let name = cfg.methods[mi].name();
        let floor = setups[ui].as_ref().ok().map(|s| s.floor);
        let (distance, status) = match res {
            Ok(d) => (Some(d), "ok".to_string()),
            Err(e) => (None, failed(&e)),
        };
        records.push(Record {
            method: name.clone(),
            d_x: u.d_x,
            d_y: u.d_y,
            sigma_y: u.sigma_y,
            model: u.model,
            model_seed: u.seed,
            n_samples: cfg.n_samples,
            distance,
            floor,
            status,
        });
        timings.push(Timing { method: name, d_x: u.d_x, d_y: u.d_y, sigma_y: u.sigma_y, model: u.model, seconds: secs });
    }
    let report = assemble(cfg, "sliced_w1", records);
    let curves = gmm_curves(cfg, &report);
    Ok((report, Outcome { timings, curves }))
}

/// Mean distance against d_x for each method, d_y and sigma_y.
fn gmm_curves(cfg: &ExperimentConfig, report: &ExperimentReport) -> Vec<Curve> {
    let mut curves = vec![];
    let mut names: Vec<String> = cfg.methods.iter().map(MethodSpec::name).collect();
    names.push("floor".into());
    for &s in &cfg.sigma_y {
        for &dy in &cfg.d_y {
            for name in &names {
                let points: Vec<(f64, f64)> = cfg
                    .d_x
                    .iter()
                    .filter_map(|&dx| {
                        let value = if name == "floor" {
                            report.aggregates.iter().find(|a| a.d_x == dx && a.d_y == dy && a.sigma_y == s).and_then(|a| a.floor_mean)
                        } else {
                            report.aggregate(name, dx, dy, s).and_then(|a| a.mean)
                        };
                        value.map(|v| (dx as f64, v))
                    })
                    .collect();
                if !points.is_empty() {
                    curves.push(Curve { name: format!("{name}_dy{dy}_s{s}"), x_label: "d_x".into(), y_label: "sliced_w1".into(), points });
                }
            }
        }
    }
    curves
}

fn assemble(cfg: &ExperimentConfig, metric: &str, records: Vec<Record>) -> ExperimentReport {
    ExperimentReport {
        experiment: cfg.experiment,
        metric: metric.into(),
        library_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        aggregates: aggregate(&records),
        records,
    }
}

struct GrfSetup {
    mm: MeasurementModel,
    post: GaussianPrior,
    exact: DMatrix<f64>,
    second: DMatrix<f64>,
}

fn grf_setup(prior: &GaussianPrior, u: &Unit, n: usize) -> Result<GrfSetup> {
    let mm = generate_mask_measurement(prior, u.d_y, u.sigma_y, &mut stream(u.seed, &[TAG_MEASUREMENT]))?;
    let post = prior.exact_posterior(&mm)?;
    let exact = post.sample(n, &mut stream(u.seed, &[TAG_EXACT]))?;
    let second = post.sample(n, &mut stream(u.seed, &[TAG_FLOOR]))?;
    Ok(GrfSetup { mm, post, exact, second })
}

/// W2 from the analytic posterior to the empirical moments of each prefix.
fn prefix_w2(post: &GaussianPrior, x: &DMatrix<f64>, counts: &[usize]) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&n| {
            let (m, c) = empirical_moments(&x.rows(0, n).into_owned())?;
            gaussian_w2(post.mean(), post.cov(), &m, &c)
        })
        .collect()
}

fn field(v: &DVector<f64>) -> Vec<(f64, f64)> {
    v.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect()
}

/// One Matern field, one mask measurement per sigma_y and model; each method
/// is scored by Gaussian W2 to the analytic posterior at every sample count.
pub fn run_grf(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(ExperimentReport, Outcome)> {
    cfg.validate()?;
    if cfg.experiment != Experiment::Grf {
        return Err(Error::Config("run_grf needs experiment = \"grf\"".into()));
    }
    let g = &cfg.grf;
    let prior = grf_build(g.grid_side, (g.domain[0], g.domain[1]), g.jitter)?;
    let mut counts = g.sample_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    let n_max = *counts.last().expect("validated nonempty");
    let units = units(cfg);
    let pool = pool(opts.workers)?;

    let setups: Vec<Result<GrfSetup>> = pool.install(|| units.par_iter().map(|u| grf_setup(&prior, u, n_max)).collect());
    let floors: Vec<Option<Vec<f64>>> = pool.install(|| {
        setups
            .par_iter()
            .map(|s| {
                let s = s.as_ref().ok()?;
                counts
                    .iter()
                    .map(|&n| {
                        let (m1, c1) = empirical_moments(&s.exact.rows(0, n).into_owned())?;
                        let (m2, c2) = empirical_moments(&s.second.rows(0, n).into_owned())?;
                        gaussian_w2(&m1, &c1, &m2, &c2)
                    })
                    .collect::<Result<Vec<f64>>>()
                    .ok()
            })
            .collect()
    });
    let tasks: Vec<(usize, usize)> = (0..units.len()).flat_map(|u| (0..cfg.methods.len()).map(move |m| (u, m))).collect();
    let results: Vec<(Result<(Vec<f64>, DVector<f64>, DVector<f64>)>, f64)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ui, mi)| {
                let u = &units[ui];
                let m = &cfg.methods[mi];
                let start = Instant::now();
                let res = match &setups[ui] {
                    Err(e) => Err(Error::Unsupported(format!("setup: {e}"))),
                    Ok(s) => {
                        let tag = cell_tag(u.d_x, u.d_y, u.sigma_y, u.model);
                        run_method(&prior, &s.mm, cfg, m, n_max, method_seed(u.seed, &m.name()), opts, &tag).and_then(|x| {
                            let w2 = prefix_w2(&s.post, &x, &counts)?;
                            let (mean, cov) = empirical_moments(&x)?;
                            Ok((w2, mean, cov.diagonal()))
                        })
                    }
                };
                (res, start.elapsed().as_secs_f64())
            })
            .collect()
    });

    let single = units.len() == 1;
    let suffix = |u: &Unit| if single { String::new() } else { format!("_s{}_m{}", u.sigma_y, u.model) };
    let mut records = vec![];
    let mut timings = vec![];
    let mut curves = vec![];
    for (ui, u) in units.iter().enumerate() {
        let sfx = suffix(u);
        if let Ok(s) = &setups[ui] {
            if let Ok(w) = prefix_w2(&s.post, &s.exact, &counts) {
                curves.push(Curve { name: format!("exact_w2{sfx}"), x_label: "n_samples".into(), y_label: "w2".into(), points: counts.iter().map(|&n| n as f64).zip(w).collect() });
            }
            if let Some(f) = &floors[ui] {
                curves.push(Curve { name: format!("floor_w2{sfx}"), x_label: "n_samples".into(), y_label: "w2".into(), points: counts.iter().map(|&n| n as f64).zip(f.iter().cloned()).collect() });
            }
            curves.push(Curve { name: format!("exact_mean{sfx}"), x_label: "grid_index".into(), y_label: "mean".into(), points: field(s.post.mean()) });
            curves.push(Curve { name: format!("exact_var{sfx}"), x_label: "grid_index".into(), y_label: "variance".into(), points: field(&s.post.cov().diagonal()) });
        }
    }
    for (&(ui, mi), (res, secs)) in tasks.iter().zip(results) {
        let u = &units[ui];
        let name = cfg.methods[mi].name();
        let sfx = suffix(u);
        let floor = |k: usize| floors[ui].as_ref().map(|f| f[k]);
        match res {
            Ok((w2, mean, var)) => {
                for (k, &n) in counts.iter().enumerate() {
                    records.push(grf_record(&name, u, n, Some(w2[k]), floor(k), "ok".into()));
                }
                let stem = report::sanitize(&name);
                curves.push(Curve { name: format!("{stem}_w2{sfx}"), x_label: "n_samples".into(), y_label: "w2".into(), points: counts.iter().map(|&n| n as f64).zip(w2).collect() });
                curves.push(Curve { name: format!("{stem}_mean{sfx}"), x_label: "grid_index".into(), y_label: "mean".into(), points: field(&mean) });
                curves.push(Curve { name: format!("{stem}_var{sfx}"), x_label: "grid_index".into(), y_label: "variance".into(), points: field(&var) });
            }
            Err(e) => {
                for (k, &n) in counts.iter().enumerate() {
                    records.push(grf_record(&name, u, n, None, floor(k), failed(&e)));
                }
            }
        }
        timings.push(Timing { method: name, d_x: u.d_x, d_y: u.d_y, sigma_y: u.sigma_y, model: u.model, seconds: secs });
    }
    Ok((assemble(cfg, "gaussian_w2", records), Outcome { timings, curves }))
}

fn grf_record(name: &str, u: &Unit, n: usize, distance: Option<f64>, floor: Option<f64>, status: String) -> Record {
    Record {
        method: name.into(),
        d_x: u.d_x,
        d_y: u.d_y,
        sigma_y: u.sigma_y,
        model: u.model,
        model_seed: u.seed,
        n_samples: n,
        distance,
        floor,
        status,
    }
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(ExperimentReport, Outcome)> {
    match cfg.experiment {
        Experiment::Gmm => run_gmm(cfg, opts),
        Experiment::Grf => run_grf(cfg, opts),
    }
}

/// Write report.csv, report.json, table.csv, timings.csv and curves/*.tsv.
pub fn write_outputs(report: &ExperimentReport, outcome: &Outcome, dir: &Path) -> Result<()> {
    emit_report(report, Format::Csv, dir)?;
    emit_report(report, Format::Json, dir)?;
    report::write_table(report, &dir.join("table.csv"))?;
    report::write_timings(&outcome.timings, &dir.join("timings.csv"))?;
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    for c in &outcome.curves {
        report::write_curve(c, &curves)?;
    }
    Ok(())
}
