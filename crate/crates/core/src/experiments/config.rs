//! Experiment configuration, read from TOML with dotted keys such as `grid.steps = 256`.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{DriverKind, GridSpec};
use crate::error::{Error, Result};
use crate::solver::SchemeKind;

pub const WORKERS_ENV: &str = "ROUGH_CHAOS_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Diagnose,
    IidRate,
    ChaosRate,
    Coupling,
}

impl ExperimentKind {
    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::Diagnose => "diagnose",
            ExperimentKind::IidRate => "iid-rate",
            ExperimentKind::ChaosRate => "chaos-rate",
            ExperimentKind::Coupling => "coupling",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "diagnose" => Ok(ExperimentKind::Diagnose),
            "iid-rate" => Ok(ExperimentKind::IidRate),
            "chaos-rate" => Ok(ExperimentKind::ChaosRate),
            "coupling" => Ok(ExperimentKind::Coupling),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format '{other}'"))),
        }
    }
}

/// Law of initial conditions and of i.i.d. samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleLaw {
    /// Standard normal in every coordinate.
    #[default]
    Normal,
    /// Uniform on the unit cube.
    Uniform,
    /// Point mass at the origin.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
    /// Driver dimension `m`.
    pub dim: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 256, dim: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientConfig {
    pub name: String,
    pub a: f64,
    pub b: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self { name: "moment_tanh".into(), a: 0.5, b: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateConfig {
    /// State dimension `d`.
    pub dim: usize,
    pub init: SampleLaw,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self { dim: 1, init: SampleLaw::Normal }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsConfig {
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self { p: 2.5, q: 2.0, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
    /// Record wall-clock time per replication. Off by default so that detail
    /// files are reproducible byte for byte.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("results"), format: OutputFormat::Csv, timing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IidConfig {
    pub law: SampleLaw,
    pub dim: usize,
    pub log_correction: bool,
}

impl Default for IidConfig {
    fn default() -> Self {
        Self { law: SampleLaw::Normal, dim: 1, log_correction: false }
    }
}

fn default_driver() -> DriverKind {
    DriverKind::Brownian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// May be left out when the experiment is chosen on the command line.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::ns")]
    pub ns: Vec<usize>,
    #[serde(default = "defaults::replications")]
    pub replications: usize,
    #[serde(default = "defaults::n_ref")]
    pub n_ref: usize,
    #[serde(default = "default_driver")]
    pub driver: DriverKind,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub coefficient: CoefficientConfig,
    #[serde(default)]
    pub state: StateConfig,
    #[serde(default)]
    pub scheme: SchemeKind,
    #[serde(default)]
    pub analytics: AnalyticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub iid: IidConfig,
}

mod defaults {
    pub fn seed() -> u64 {
        20240601
    }
    pub fn ns() -> Vec<usize> {
        vec![16, 32, 64, 128, 256, 512]
    }
    pub fn replications() -> usize {
        64
    }
    pub fn n_ref() -> usize {
        4096
    }
}

impl ExperimentConfig {
    /// Defaults for `kind` (the desk-scale settings).
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            experiment: Some(kind),
            seed: defaults::seed(),
            ns: defaults::ns(),
            replications: defaults::replications(),
            n_ref: defaults::n_ref(),
            driver: default_driver(),
            grid: GridConfig::default(),
            coefficient: CoefficientConfig::default(),
            state: StateConfig::default(),
            scheme: SchemeKind::default(),
            analytics: AnalyticsConfig::default(),
            output: OutputConfig::default(),
            iid: IidConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn kind(&self) -> Result<ExperimentKind> {
        self.experiment.ok_or_else(|| Error::Config("no experiment selected".into()))
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.horizon, self.grid.steps, self.grid.dim).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every cross-field invariant. All failures are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ns.is_empty() {
            return bad("ns must not be empty".into());
        }
        if self.ns.contains(&0) {
            return bad("every n must be positive".into());
        }
        if self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ns must be strictly ascending, got {:?}", self.ns));
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        self.driver.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.grid_spec()?;
        if self.state.dim == 0 {
            return bad("state.dim must be positive".into());
        }
        let max_n = *self.ns.last().unwrap();
        match kind {
            ExperimentKind::Diagnose => {
                let a = &self.analytics;
                if !(2.0..3.0).contains(&a.p) || !(a.q >= 1.0) || !(a.alpha > 0.0) {
                    return bad(format!("analytics need p in [2, 3), q >= 1, alpha > 0; got {a:?}"));
                }
            }
            ExperimentKind::IidRate => {
                if !(1..=3).contains(&self.iid.dim) {
                    return bad(format!("iid.dim must be 1, 2 or 3, got {}", self.iid.dim));
                }
                if self.iid.law == SampleLaw::Zero {
                    return bad("iid.law must be normal or uniform".into());
                }
                if self.iid.dim >= 2 && self.n_ref < max_n {
                    return bad(format!("n_ref = {} must be at least max(ns) = {max_n}", self.n_ref));
                }
            }
            ExperimentKind::ChaosRate | ExperimentKind::Coupling => {
                if self.n_ref < 4 * max_n {
                    return bad(format!("n_ref = {} must be at least 4 max(ns) = {}", self.n_ref, 4 * max_n));
                }
                if kind == ExperimentKind::ChaosRate && self.state.dim != 1 {
                    return bad("chaos-rate compares against an unequal-size reference and needs state.dim = 1".into());
                }
                crate::coeff::builtin(&self.coefficient.name, self.coefficient.a, self.coefficient.b, self.state.dim, self.grid.dim)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Worker count: explicit value, then the environment variable, then all cores.
pub fn resolve_workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(w) = explicit {
        return if w == 0 { Err(Error::Config("--workers must be positive".into())) } else { Ok(w) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
