//! Run configuration: the embedded defaults, user overrides, path
//! environment overrides and the resolved dump.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wastebench_core::metrics::BaselineBasis;
use wastebench_core::pipeline::{AugmentationRanges, NormalizationStats};
use wastebench_models::graph::Reduction;
use wastebench_models::optim::{build_optimizer, OptimizerKind, OptimizerSpec};
use wastebench_models::trainer::{Monitor, TrainConfig};
use wastebench_models::NetworkSpec;

use crate::error::CliError;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// Environment variables that override `[paths]` entries.
pub const PATH_ENV: [(&str, &str); 7] = [
    ("manifest", "WASTEBENCH_MANIFEST"),
    ("corrections", "WASTEBENCH_CORRECTIONS"),
    ("data_root", "WASTEBENCH_DATA_ROOT"),
    ("dataset_root", "WASTEBENCH_DATASET_ROOT"),
    ("output_root", "WASTEBENCH_OUTPUT_ROOT"),
    ("baselines", "WASTEBENCH_BASELINES"),
    ("weights_registry", "WASTEBENCH_WEIGHTS"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub pipeline: PipelineSection,
    pub train: TrainSection,
    pub optimizers: BTreeMap<OptimizerKind, BTreeMap<String, f64>>,
    pub model: NetworkSpec,
    pub report: ReportSection,
}

/// Paths; an empty string means unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub corrections: PathBuf,
    pub data_root: PathBuf,
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    pub baselines: PathBuf,
    pub weights_registry: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub balance_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub online_augmentation: bool,
    pub augmentation: AugmentationRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub input_channels: usize,
    pub global_seed: u64,
    pub mixed_precision: bool,
    pub reduction: Reduction,
    pub monitor: Monitor,
    pub n_steps: Option<u64>,
    pub workers: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub tolerance_pp: f64,
    pub basis: BaselineBasis,
    pub formats: Vec<ReportFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
    Svg,
}

/// Recursively overlay `over` onto `base`. Tables merge key by key; any
/// other value replaces the base value. The `model` table is replaced
/// wholesale because its keys depend on its kind.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if key != "model" => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Validation(format!("{origin}: {e}")))
}

/// Rebase every non-empty relative path in `[paths]` of `table` on `dir`.
fn rebase_paths(table: &mut toml::Table, dir: &Path) {
    let Some(toml::Value::Table(paths)) = table.get_mut("paths") else { return };
    for (_, value) in paths.iter_mut() {
        if let toml::Value::String(s) = value {
            if !s.is_empty() && Path::new(s.as_str()).is_relative() {
                let rebased = dir.join(s.as_str()).to_string_lossy().into_owned();
                *s = rebased;
            }
        }
    }
}

impl RunConfig {
    /// Defaults merged with an optional user file, then environment path
    /// overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig, CliError> {
        let mut table = parse_table(DEFAULT_CONFIG, "default config")?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
            let mut user = parse_table(&text, &path.display().to_string())?;
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            rebase_paths(&mut user, dir);
            merge(&mut table, user);
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        for (key, var) in PATH_ENV {
            if let Some(value) = env(var).filter(|v| !v.is_empty()) {
                *config.paths.get_mut(key) = PathBuf::from(value);
            }
        }
        // Absolute paths make a dumped config independent of where it is stored.
        for (key, _) in PATH_ENV {
            let path = config.paths.get_mut(key);
            if !path.as_os_str().is_empty() {
                *path = std::path::absolute(&*path)
                    .map_err(|e| CliError::Io(format!("paths.{key}: {e}")))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_env(path: Option<&Path>) -> Result<RunConfig, CliError> {
        RunConfig::load(path, |k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.stats()?;
        self.pipeline
            .augmentation
            .validate()
            .map_err(|e| CliError::Validation(format!("pipeline.augmentation: {e}")))?;
        let f = self.dataset.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Validation(format!(
                "dataset.validation_fraction must be in (0, 1), got {f}"
            )));
        }
        if !(self.report.tolerance_pp.is_finite() && self.report.tolerance_pp >= 0.0) {
            return Err(CliError::Validation("report.tolerance_pp must be a non-negative number".into()));
        }
        for kind in OptimizerKind::ALL {
            build_optimizer(&self.optimizer_spec(kind), 1e-3, 0)
                .map_err(|e| CliError::Validation(format!("optimizers.{kind}: {e}")))?;
        }
        self.train_config(self.train.optimizer)
            .validate()
            .map_err(|e| CliError::Validation(format!("train: {e}")))
    }

    pub fn stats(&self) -> Result<NormalizationStats, CliError> {
        NormalizationStats::new(self.pipeline.mean, self.pipeline.std)
            .map_err(|e| CliError::Validation(format!("pipeline: {e}")))
    }

    /// Configured hyperparameters of `kind`, with defaults for any missing.
    pub fn optimizer_spec(&self, kind: OptimizerKind) -> OptimizerSpec {
        let mut spec = OptimizerSpec::new(kind);
        if let Some(overrides) = self.optimizers.get(&kind) {
            spec.hyperparams.extend(overrides.iter().map(|(k, v)| (k.clone(), *v)));
        }
        spec
    }

    pub fn train_config(&self, kind: OptimizerKind) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            folds: t.folds,
            input_channels: t.input_channels,
            optimizer: self.optimizer_spec(kind),
            global_seed: t.global_seed,
            mixed_precision: t.mixed_precision,
            reduction: t.reduction,
            monitor: t.monitor,
            n_steps: t.n_steps,
            workers: t.workers,
        }
    }

    /// Every value spelled out, loadable as a config file.
    pub fn to_toml(&self) -> String {
        let mut text = String::from("# Resolved configuration; re-running with this file reproduces the run.\n");
        text.push_str(&toml::to_string_pretty(self).expect("config serializes"));
        text
    }

    pub fn required_path(&self, key: &str) -> Result<&Path, CliError> {
        let p = self.paths.get(key);
        if p.as_os_str().is_empty() {
            return Err(CliError::Validation(format!("paths.{key} is not set")));
        }
        Ok(p)
    }

    pub fn optional_path(&self, key: &str) -> Option<&Path> {
        let p = self.paths.get(key);
        (!p.as_os_str().is_empty()).then_some(p)
    }
}

impl Paths {
    fn get(&self, key: &str) -> &Path {
        match key {
            "manifest" => &self.manifest,
            "corrections" => &self.corrections,
            "data_root" => &self.data_root,
            "dataset_root" => &self.dataset_root,
            "output_root" => &self.output_root,
            "baselines" => &self.baselines,
            "weights_registry" => &self.weights_registry,
            _ => unreachable!("unknown path key {key}"),
        }
    }

    fn get_mut(&mut self, key: &str) -> &mut PathBuf {
        match key {
            "manifest" => &mut self.manifest,
            "corrections" => &mut self.corrections,
            "data_root" => &mut self.data_root,
            "dataset_root" => &mut self.dataset_root,
            "output_root" => &mut self.output_root,
            "baselines" => &mut self.baselines,
            "weights_registry" => &mut self.weights_registry,
            _ => unreachable!("unknown path key {key}"),
        }
    }
}
