//! JSON experiment configuration.
//!
//! Syntax errors carry serde's line and column. Semantic errors name the
//! offending field and, when the key occurs in the file, its line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvOptions, LearningRateSchedule};
use crate::two_layer::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Regression,
    TwoLayer,
    Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_layer: Option<TwoLayerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_resamples() -> usize {
    1000
}

fn default_level() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv(CsvSource),
    Synthetic { n: usize, p: usize, noise: f64 },
    Inline { features: Vec<Vec<f64>>, targets: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub target_column: String,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub intercept: bool,
    #[serde(default)]
    pub exclude_columns: Vec<String>,
}

impl CsvSource {
    pub fn options(&self) -> CsvOptions {
        CsvOptions {
            target_column: self.target_column.clone(),
            standardize: self.standardize,
            intercept: self.intercept,
            exclude_columns: self.exclude_columns.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub dataset: DatasetSource,
    /// Initial weights; drawn from the initial-weights stream when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<Vec<f64>>,
    pub schedule: LearningRateSchedule,
    pub batch_sizes: Vec<usize>,
    pub t_max: usize,
    /// Monte Carlo runs per batch size; 0 skips the simulation.
    #[serde(default)]
    pub runs: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoLayerConfig {
    /// Defaults to 8-16-8.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Dims>,
    /// Uses the 64-256-128 network; overrides `dims`.
    #[serde(default)]
    pub full_scale: bool,
    pub schedule: LearningRateSchedule,
    pub batch_sizes: Vec<usize>,
    pub t_max: usize,
    pub runs: usize,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub fit_times: Vec<usize>,
    #[serde(default = "default_fit_degree")]
    pub fit_degree: usize,
    /// Smallest batch size from which monotonicity is asserted.
    #[serde(default = "default_monotone_from")]
    pub monotone_from: usize,
}

fn default_fit_degree() -> usize {
    2
}

fn default_monotone_from() -> usize {
    4
}

impl TwoLayerConfig {
    pub fn effective_dims(&self) -> Dims {
        if self.full_scale {
            Dims::FULL
        } else {
            self.dims.unwrap_or(Dims::DESK)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub dim: usize,
    pub samples: usize,
    /// Sample-label patterns of even length; the built-in catalogue when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_z_limit")]
    pub z_limit: f64,
}

fn default_z_limit() -> f64 {
    5.0
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Syntax {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}{}: field `{field}`: {reason}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Semantic {
        path: PathBuf,
        field: String,
        line: Option<usize>,
        reason: String,
    },
}

/// 1-based line of the first occurrence of `"key"` followed by a colon.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    for (i, line) in text.lines().enumerate() {
        if let Some(pos) = line.find(&needle) {
            if line[pos + needle.len()..].trim_start().starts_with(':') {
                return Some(i + 1);
            }
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub text: String,
}

impl LoadedConfig {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    fn semantic(&self, field: &str, reason: impl Into<String>) -> ConfigError {
        let key = field.rsplit('.').next().unwrap_or(field);
        ConfigError::Semantic {
            path: self.path.clone(),
            field: field.to_owned(),
            line: locate_key(&self.text, key),
            reason: reason.into(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, path: &Path) -> Result<LoadedConfig, ConfigError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|source| ConfigError::Syntax {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = LoadedConfig {
        config,
        path: path.to_path_buf(),
        text: text.to_owned(),
    };
    validate(&loaded)?;
    Ok(loaded)
}

fn check_schedule(l: &LoadedConfig, prefix: &str, s: &LearningRateSchedule) -> Result<(), ConfigError> {
    s.validate().map_err(|e| l.semantic(&format!("{prefix}.schedule.scale"), e.to_string()))
}

fn check_level(l: &LoadedConfig, field: &str, level: f64) -> Result<(), ConfigError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(l.semantic(field, format!("must lie in (0, 1), got {level}")));
    }
    Ok(())
}

/// Dataset size when it is known without reading files.
fn inline_n(source: &DatasetSource) -> Option<usize> {
    match source {
        DatasetSource::Csv(_) => None,
        DatasetSource::Synthetic { n, .. } => Some(*n),
        DatasetSource::Inline { targets, .. } => Some(targets.len()),
    }
}

/// Checks everything that does not require loading data. Batch sizes of a
/// CSV dataset are checked against `n` once it is loaded.
pub fn validate(l: &LoadedConfig) -> Result<(), ConfigError> {
    let c = &l.config;
    let section_present = match c.experiment {
        ExperimentKind::Regression => c.regression.is_some(),
        ExperimentKind::TwoLayer => c.two_layer.is_some(),
        ExperimentKind::Moments => c.moments.is_some(),
    };
    if !section_present {
        let name = match c.experiment {
            ExperimentKind::Regression => "regression",
            ExperimentKind::TwoLayer => "two_layer",
            ExperimentKind::Moments => "moments",
        };
        return Err(l.semantic("experiment", format!("the `{name}` section is required")));
    }

    if let Some(r) = &c.regression {
        check_schedule(l, "regression", &r.schedule)?;
        check_level(l, "regression.ci_level", r.ci_level)?;
        if r.batch_sizes.is_empty() {
            return Err(l.semantic("regression.batch_sizes", "must not be empty"));
        }
        if r.batch_sizes.contains(&0) {
            return Err(l.semantic("regression.batch_sizes", "batch sizes must be >= 1"));
        }
        if let Some(n) = inline_n(&r.dataset) {
            if let Some(&b) = r.batch_sizes.iter().find(|&&b| b > n) {
                return Err(l.semantic("regression.batch_sizes", format!("batch size {b} exceeds n = {n}")));
            }
        }
        if let DatasetSource::Synthetic { n, p, noise } = &r.dataset {
            if *n < 2 || *p < 1 || !noise.is_finite() {
                return Err(l.semantic("regression.dataset.synthetic", "need n >= 2, p >= 1 and a finite noise level"));
            }
        }
        if r.runs == 1 {
            return Err(l.semantic("regression.runs", "use 0 (no simulation) or at least 2 runs"));
        }
        if r.runs >= 2 && r.bootstrap_resamples == 0 {
            return Err(l.semantic("regression.bootstrap_resamples", "must be >= 1"));
        }
    }

    if let Some(t) = &c.two_layer {
        check_schedule(l, "two_layer", &t.schedule)?;
        check_level(l, "two_layer.ci_level", t.ci_level)?;
        if let Err(e) = t.effective_dims().validate() {
            return Err(l.semantic("two_layer.dims", e.to_string()));
        }
        if t.batch_sizes.is_empty() || t.batch_sizes.contains(&0) {
            return Err(l.semantic("two_layer.batch_sizes", "need a non-empty list of sizes >= 1"));
        }
        if t.runs < crate::two_layer::MIN_SWEEP_RUNS {
            return Err(l.semantic(
                "two_layer.runs",
                format!("need at least {} runs, got {}", crate::two_layer::MIN_SWEEP_RUNS, t.runs),
            ));
        }
        if t.bootstrap_resamples == 0 {
            return Err(l.semantic("two_layer.bootstrap_resamples", "must be >= 1"));
        }
        if let Some(&ft) = t.fit_times.iter().find(|&&ft| ft > t.t_max) {
            return Err(l.semantic("two_layer.fit_times", format!("iteration {ft} exceeds t_max = {}", t.t_max)));
        }
        if !t.fit_times.is_empty() && t.batch_sizes.len() < t.fit_degree + 2 {
            return Err(l.semantic(
                "two_layer.fit_degree",
                format!("a degree-{} fit with intercept needs at least {} batch sizes", t.fit_degree, t.fit_degree + 2),
            ));
        }
    }

    if let Some(m) = &c.moments {
        if m.dim == 0 {
            return Err(l.semantic("moments.dim", "must be >= 1"));
        }
        if m.samples < crate::wick::MIN_MC_SAMPLES {
            return Err(l.semantic("moments.samples", format!("need at least {}", crate::wick::MIN_MC_SAMPLES)));
        }
        if let Some(ps) = &m.patterns {
            if let Some(bad) = ps.iter().find(|p| p.len() < 2 || p.len() % 2 == 1 || p.len() / 2 > crate::wick::MAX_FACTORS) {
                return Err(l.semantic("moments.patterns", format!("pattern {bad:?} needs an even length in [2, 10]")));
            }
        }
    }
    Ok(())
}

/// Checks batch sizes against a loaded dataset.
pub fn validate_batch_sizes(l: &LoadedConfig, n: usize) -> Result<(), ConfigError> {
    if let Some(r) = &l.config.regression {
        if let Some(&b) = r.batch_sizes.iter().find(|&&b| b > n) {
            return Err(l.semantic("regression.batch_sizes", format!("batch size {b} exceeds n = {n}")));
        }
    }
    Ok(())
}
