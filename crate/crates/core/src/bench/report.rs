use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Experiment;
use crate::error::Result;

pub const CI_Z: f64 = 1.96;

/// One (cell, model, method) result. For grf there is one row per sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: String,
    pub d_x: usize,
    pub d_y: usize,
    pub sigma_y: f64,
    pub model: usize,
    pub model_seed: u64,
    pub n_samples: usize,
    pub distance: Option<f64>,
    /// Distance between two independent draws from the exact posterior.
    pub floor: Option<f64>,
    pub status: String,
}

impl Record {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub d_x: usize,
    pub d_y: usize,
    pub sigma_y: f64,
    pub n_samples: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub floor_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub metric: String,
    pub library_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.ok()).count()
    }

    pub fn aggregate(&self, method: &str, d_x: usize, d_y: usize, sigma_y: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .filter(|a| a.method == method && a.d_x == d_x && a.d_y == d_y && a.sigma_y == sigma_y)
            .max_by_key(|a| a.n_samples)
    }
}

/// Wall-clock seconds per (cell, model, method); kept out of the report so
/// reports stay byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: String,
    pub d_x: usize,
    pub d_y: usize,
    pub sigma_y: f64,
    pub model: usize,
    pub seconds: f64,
}

/// A two-column numeric series written as `curves/<name>.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub timings: Vec<Timing>,
    pub curves: Vec<Curve>,
}

/// Mean and 1.96 * sd / sqrt(n) with the n - 1 sample deviation (zero for n = 1).
pub fn mean_ci(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, CI_Z * var.sqrt() / n.sqrt()))
}

type Key = (String, usize, usize, u64, usize);

/// Group records by (method, cell, sample count), keeping first-seen order.
pub fn aggregate(records: &[Record]) -> Vec<Aggregate> {
    let mut order: Vec<Key> = vec![];
    let mut groups: BTreeMap<Key, Vec<&Record>> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.d_x, r.d_y, r.sigma_y.to_bits(), r.n_samples);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let vals: Vec<f64> = rs.iter().filter(|r| r.ok()).filter_map(|r| r.distance).collect();
            let floors: Vec<f64> = rs.iter().filter_map(|r| r.floor).collect();
            let mc = mean_ci(&vals);
            Aggregate {
                method: key.0.clone(),
                d_x: key.1,
                d_y: key.2,
                sigma_y: f64::from_bits(key.3),
                n_samples: key.4,
                n_ok: vals.len(),
                n_failed: rs.len() - vals.len(),
                mean: mc.map(|m| m.0),
                ci95: mc.map(|m| m.1),
                floor_mean: mean_ci(&floors).map(|m| m.0),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Write `report.csv` or `report.json` under `dir` and return its path.
pub fn emit_report(report: &ExperimentReport, format: Format, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    match format {
        Format::Json => {
            let path = dir.join("report.json");
            let mut text = serde_json::to_string_pretty(report)?;
            text.push('\n');
            fs::write(&path, text)?;
            Ok(path)
        }
        Format::Csv => {
            let path = dir.join("report.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for r in &report.records {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(path)
        }
    }
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn fmt_cell(a: Option<&Aggregate>) -> String {
    match a.and_then(|a| a.mean.zip(a.ci95)) {
        Some((m, c)) => format!("{m:.3} ± {c:.3}"),
        None => "-".into(),
    }
}

/// Summary table: one block of rows per sigma_y, one row per (d_x, d_y),
/// one column per method, entries "mean ± ci" or "-" when every model failed.
pub fn write_table(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut methods: Vec<&str> = vec![];
    let mut cells: Vec<(u64, usize, usize)> = vec![];
    for a in &report.aggregates {
        if !methods.contains(&a.method.as_str()) {
            methods.push(&a.method);
        }
        let c = (a.sigma_y.to_bits(), a.d_x, a.d_y);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sigma_y".to_string(), "d_x".into(), "d_y".into(), "floor".into()];
    header.extend(methods.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for (s, dx, dy) in cells {
        let sigma = f64::from_bits(s);
        let floor = report
            .aggregates
            .iter()
            .filter(|a| a.d_x == dx && a.d_y == dy && a.sigma_y == sigma)
            .max_by_key(|a| a.n_samples)
            .and_then(|a| a.floor_mean)
            .map_or("-".into(), |f| format!("{f:.3}"));
        let mut row = vec![sigma.to_string(), dx.to_string(), dy.to_string(), floor];
        row.extend(methods.iter().map(|m| fmt_cell(report.aggregate(m, dx, dy, sigma))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings(timings: &[Timing], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in timings {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve(curve: &Curve, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.tsv", sanitize(&curve.name)));
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(f, "# {}\t{}", curve.x_label, curve.y_label)?;
    for (x, y) in &curve.points {
        writeln!(f, "{x}\t{y}")?;
    }
    f.flush()?;
    Ok(path)
}

/// File-name-safe version of a method label.
pub fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, model: usize, d: Option<f64>) -> Record {
        Record {
            method: method.into(),
            d_x: 8,
            d_y: 1,
            sigma_y: 0.01,
            model,
            model_seed: model as u64,
            n_samples: 10,
            distance: d,
            floor: Some(0.1),
            status: if d.is_some() { "ok".into() } else { "failed: boom".into() },
        }
    }

    #[test]
    fn ci_formula() {
        let (m, c) = mean_ci(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((c - 1.96 * sd / 2.0).abs() < 1e-15);
        assert_eq!(mean_ci(&[3.0]), Some((3.0, 0.0)));
        assert_eq!(mean_ci(&[]), None);
    }

    #[test]
    fn aggregation_skips_failures() {
        let rs = vec![rec("a", 0, Some(1.0)), rec("a", 1, None), rec("a", 2, Some(3.0)), rec("b", 0, None)];
        let ag = aggregate(&rs);
        assert_eq!(ag.len(), 2);
        assert_eq!(ag[0].mean, Some(2.0));
        assert_eq!((ag[0].n_ok, ag[0].n_failed), (2, 1));
        assert_eq!(ag[1].mean, None);
    }

    #[test]
    fn sanitize_names() {
        assert_eq!(sanitize("dps-chung:1@ddpm-vp"), "dps-chung_1_ddpm-vp");
    }
}
