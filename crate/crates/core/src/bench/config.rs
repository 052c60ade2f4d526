use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::GuidanceKind;
use crate::metrics::DEFAULT_SLICES;
use crate::sampler::SamplerMethod;
use crate::schedule::{Schedule, SdeKind, VeSchedule, VpSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Gmm,
    Grf,
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Experiment::Gmm => "gmm",
            Experiment::Grf => "grf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub guidance: GuidanceKind,
    pub sampler: SamplerMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| format!("{}@{}", self.guidance, self.sampler))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfConfig {
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    #[serde(default = "default_domain")]
    pub domain: [f64; 2],
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Fraction of grid points observed by the random mask.
    #[serde(default = "default_observed")]
    pub observed_fraction: f64,
    #[serde(default = "default_counts")]
    pub sample_counts: Vec<usize>,
}

fn default_grid_side() -> usize {
    32
}
fn default_domain() -> [f64; 2] {
    [-5.0, 5.0]
}
fn default_jitter() -> f64 {
    1e-6
}
fn default_observed() -> f64 {
    0.5
}
fn default_counts() -> Vec<usize> {
    vec![9, 25, 50, 100, 250, 500, 1000, 1500]
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self {
            grid_side: default_grid_side(),
            domain: default_domain(),
            jitter: default_jitter(),
            observed_fraction: default_observed(),
            sample_counts: default_counts(),
        }
    }
}

impl GrfConfig {
    pub fn d_x(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn d_y(&self) -> usize {
        ((self.observed_fraction * self.d_x() as f64).round() as usize).clamp(1, self.d_x())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub d_x: Vec<usize>,
    #[serde(default)]
    pub d_y: Vec<usize>,
    pub sigma_y: Vec<f64>,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_models")]
    pub n_models: usize,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_slices")]
    pub n_slices: usize,
    /// VP schedule; defaults to beta in [0.1, 500] for gmm and [0.1, 20] for grf.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vp: Option<VpSchedule>,
    #[serde(default)]
    pub ve: VeSchedule,
    #[serde(default)]
    pub grf: GrfConfig,
    #[serde(default)]
    pub save_samples: bool,
    #[serde(default)]
    pub diagnostics: bool,
}

fn default_models() -> usize {
    20
}
fn default_samples() -> usize {
    1000
}
fn default_steps() -> usize {
    1000
}
fn default_slices() -> usize {
    DEFAULT_SLICES
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn vp_schedule(&self) -> VpSchedule {
        self.vp.unwrap_or(match self.experiment {
            Experiment::Gmm => VpSchedule { beta_min: 0.1, beta_max: 500.0, horizon: 1.0 },
            Experiment::Grf => VpSchedule::default(),
        })
    }

    pub fn schedule_for(&self, method: SamplerMethod) -> Schedule {
        match method.sde() {
            SdeKind::Vp => Schedule::Vp(self.vp_schedule()),
            SdeKind::Ve => Schedule::Ve(self.ve),
        }
    }

    /// (d_x, d_y, sigma_y) cells in row-major order of the three lists.
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        match self.experiment {
            Experiment::Gmm => {
                let mut out = vec![];
                for &s in &self.sigma_y {
                    for &dx in &self.d_x {
                        for &dy in &self.d_y {
                            out.push((dx, dy, s));
                        }
                    }
                }
                out
            }
            Experiment::Grf => self.sigma_y.iter().map(|&s| (self.grf.d_x(), self.grf.d_y(), s)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.sigma_y.is_empty() || self.sigma_y.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("sigma_y must be a nonempty list of positive numbers".into());
        }
        if self.n_models == 0 || self.steps < 2 || self.n_slices == 0 {
            return bad("n_models and n_slices must be positive and steps at least 2".into());
        }
        let mut names: Vec<String> = self.methods.iter().map(MethodSpec::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("method labels must be unique".into());
        }
        self.vp_schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.ve.validate().map_err(|e| Error::Config(e.to_string()))?;
        match self.experiment {
            Experiment::Gmm => {
                if self.d_x.is_empty() || self.d_y.is_empty() {
                    return bad("gmm needs nonempty d_x and d_y lists".into());
                }
                if self.n_samples == 0 {
                    return bad("n_samples must be positive".into());
                }
                for &dx in &self.d_x {
                    if dx < 2 || dx % 2 != 0 {
                        return bad(format!("gmm d_x must be even and >= 2, got {dx}"));
                    }
                    for &dy in &self.d_y {
                        if dy == 0 || dy > dx {
                            return bad(format!("invalid pair (d_x, d_y) = ({dx}, {dy})"));
                        }
                    }
                }
            }
            Experiment::Grf => {
                let g = &self.grf;
                if g.grid_side < 2 || !(g.domain[1] > g.domain[0]) || !(g.jitter >= 0.0) {
                    return bad("grf needs grid_side >= 2, an increasing domain and nonnegative jitter".into());
                }
                if !(g.observed_fraction > 0.0 && g.observed_fraction <= 1.0) {
                    return bad("observed_fraction must lie in (0, 1]".into());
                }
                if g.sample_counts.is_empty() || g.sample_counts.iter().any(|&n| n < 2) {
                    return bad("sample_counts must be a nonempty list of counts >= 2".into());
                }
                if !self.d_x.is_empty() || !self.d_y.is_empty() {
                    return bad("grf derives d_x and d_y from the grid; remove them".into());
                }
            }
        }
        Ok(())
    }

    /// Shrink to a run that finishes in seconds.
    pub fn smoke(mut self) -> Self {
        self.n_models = 1;
        self.n_samples = self.n_samples.min(10);
        self.steps = self.steps.min(10);
        self.n_slices = self.n_slices.min(100);
        self.grf.grid_side = self.grf.grid_side.min(4);
        self.grf.sample_counts = vec![5, 10];
        self
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
