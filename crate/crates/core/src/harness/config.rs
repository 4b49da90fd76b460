use super::HarnessError;
use crate::data::SyntheticSpec;
use crate::metrics::MetricOptions;
use crate::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Command-line overrides shared by every verb.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalOptions {
    pub out: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    pub seed: Option<u64>,
    /// Forbid anything that could reorder work (parallel sweeps).
    pub deterministic: bool,
}

/// One training experiment: data, budget, seeds and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to `<method>_la<labeled>` (with `_fp` in FP mode).
    pub run_id: Option<String>,
    /// Relative paths are resolved against the config file's directory.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Keep this many labeled training volumes (chosen by `split_seed`).
    pub labeled: Option<usize>,
    /// Keep at most this many unlabeled volumes.
    pub unlabeled: Option<usize>,
    pub split_seed: u64,
    pub metrics: MetricOptions,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            manifest: PathBuf::new(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            labeled: None,
            unlabeled: None,
            split_seed: 0,
            metrics: MetricOptions::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Invalid(m));
        if self.manifest.as_os_str().is_empty() {
            return fail("manifest path is required".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return fail(format!("seeds {:?} contain duplicates", self.seeds));
        }
        let q = self.metrics.hd_percentile;
        if !(q > 0.0 && q <= 100.0) {
            return fail(format!("metrics.hd_percentile must lie in (0, 100], got {q}"));
        }
        if self.labeled == Some(0) {
            return fail("labeled must be at least 1".into());
        }
        if self.train.mode == TrainMode::FpSemisup && self.unlabeled == Some(0) {
            return fail("fp_semisup needs unlabeled volumes but unlabeled = 0".into());
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) {
                return fail(format!("run_id {id:?} must be a non-empty file name"));
            }
        }
        Ok(self.train.validate()?)
    }

    /// Apply command-line overrides.
    pub fn with_globals(mut self, globals: &GlobalOptions) -> Self {
        if let Some(out) = &globals.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = globals.seed {
            self.seeds = vec![seed];
        }
        self
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.manifest, &mut self.out_dir] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn default_run_id(&self, labeled: usize) -> String {
        let fp = if self.train.mode == TrainMode::FpSemisup {
            "_fp"
        } else {
            ""
        };
        format!("{}{fp}_la{labeled}", self.train.method.name())
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| HarnessError::Config {
        path: path.to_path_buf(),
        // toml errors span several lines; keep the first
        message: e.message().to_string(),
    })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Parse and validate an experiment file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg: ExperimentConfig = read_toml(path)?;
    cfg.resolve(&base_dir(path));
    cfg.validate()?;
    Ok(cfg)
}

/// Parse and validate a synthetic-corpus file; `seed` overrides its seed.
pub fn load_synthetic(path: &Path, seed: Option<u64>) -> Result<SyntheticSpec, HarnessError> {
    let mut spec: SyntheticSpec = read_toml(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KernelR,
    LambdaBoundary,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::KernelR => "kernel_r",
            SweepAxis::LambdaBoundary => "lambda_boundary",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::KernelR => vec![1.0, 3.0, 5.0, 7.0, 9.0],
            SweepAxis::LambdaBoundary => vec![1.0, 3.0, 10.0, 30.0, 100.0],
        }
    }

    /// The experiment with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            SweepAxis::KernelR => cfg.train.r = value as usize,
            SweepAxis::LambdaBoundary => cfg.train.weights.lambda_boundary = value,
        }
        cfg
    }
}

/// One-axis ablation over a base experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    /// Configured values, or the axis defaults when none are listed.
    pub fn values(&self) -> Vec<f64> {
        if self.values.is_empty() {
            self.axis.default_values()
        } else {
            self.values.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Invalid(m));
        for v in self.values() {
            match self.axis {
                SweepAxis::KernelR => {
                    if !(v >= 1.0 && v.fract() == 0.0 && (v as u64) % 2 == 1) {
                        return fail(format!("kernel_r value {v} must be a positive odd integer"));
                    }
                }
                SweepAxis::LambdaBoundary => {
                    if !(v >= 0.0 && v.is_finite()) {
                        return fail(format!("lambda_boundary value {v} must be finite and non-negative"));
                    }
                }
            }
        }
        let values = self.values();
        for (i, v) in values.iter().enumerate() {
            if values[..i].contains(v) {
                return fail(format!("sweep value {v} is listed twice"));
            }
        }
        for v in values {
            self.axis.apply(&self.base, v).validate()?;
        }
        Ok(())
    }
}

/// Parse and validate a sweep file; `[base]` holds an experiment.
pub fn load_sweep(path: &Path) -> Result<SweepSpec, HarnessError> {
    let mut spec: SweepSpec = read_toml(path)?;
    spec.base.resolve(&base_dir(path));
    spec.validate()?;
    Ok(spec)
}
