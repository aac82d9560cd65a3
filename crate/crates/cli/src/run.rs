use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wastebench_core::manifest::Split;
use wastebench_models::data::{Dataset, InputPipeline};
use wastebench_models::optim::OptimizerKind;
use wastebench_models::trainer::{self, history_csv, load_checkpoint, save_checkpoint, TrainingState};
use wastebench_models::{
    build_network, Architecture, ModelSpec, NetworkSpec, ParallelEnsembleSpec, WeightsSource,
};

use crate::config::RunConfig;
use crate::dataset::write;
use crate::error::CliError;
use crate::{PredictArgs, TrainArgs};

pub(crate) const CHECKPOINT_FILE: &str = "checkpoint.wbck";
pub(crate) const HISTORY_FILE: &str = "history.csv";
pub(crate) const PREDICTIONS_FILE: &str = "predictions.csv";
pub(crate) const RUN_FILE: &str = "run.json";
pub(crate) const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Facts about a finished run, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RunSummary {
    pub model: String,
    pub optimizer: String,
    pub optimizer_spec: String,
    pub seed: u64,
    pub frozen_prefix: usize,
    pub parameter_count: usize,
    pub trainable_parameter_count: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub prediction_split: String,
}

fn parse_optimizers(arg: Option<&str>, default: OptimizerKind) -> Result<Vec<OptimizerKind>, CliError> {
    match arg {
        None => Ok(vec![default]),
        Some("all") => Ok(OptimizerKind::ALL.to_vec()),
        Some(name) => name
            .parse()
            .map(|k| vec![k])
            .map_err(|e: wastebench_models::optim::OptimError| CliError::Validation(e.to_string())),
    }
}

/// The config model, replaced by `--model` when that names a different
/// network, with the seed and frozen prefix applied.
fn network_spec(config: &RunConfig, args: &TrainArgs, seed: u64) -> Result<NetworkSpec, CliError> {
    let mut spec = match args.model.as_deref() {
        None => config.model.clone(),
        Some(name) if name == config.model.name() => config.model.clone(),
        Some("parallel_ensemble") => NetworkSpec::ParallelEnsemble(ParallelEnsembleSpec::standard()),
        Some(name) => {
            let arch: Architecture = name.parse().map_err(|e: wastebench_models::ModelError| {
                CliError::Validation(e.to_string())
            })?;
            NetworkSpec::Single(ModelSpec::new(arch))
        }
    };
    match &mut spec {
        NetworkSpec::Single(s) => {
            s.seed = seed;
            if let Some(n) = args.freeze {
                s.frozen_prefix = n;
            }
        }
        NetworkSpec::ParallelEnsemble(e) => {
            e.seed = seed;
            e.backbone_a.seed = seed;
            e.backbone_b.seed = seed;
            if args.freeze.is_some() {
                return Err(CliError::Validation(
                    "--freeze applies to single models; set frozen_prefix of each backbone in [model]".into(),
                ));
            }
        }
    }
    Ok(spec)
}

fn weights(config: &RunConfig) -> WeightsSource {
    config
        .optional_path("weights_registry")
        .map_or(WeightsSource::None, |p| WeightsSource::Registry(p.to_path_buf()))
}

pub(crate) fn input_pipeline(config: &RunConfig, seed: u64) -> Result<InputPipeline, CliError> {
    let mut input = InputPipeline::new(config.stats()?);
    if config.pipeline.online_augmentation {
        input.augmentation = Some(config.pipeline.augmentation);
    }
    input.seed = seed;
    Ok(input)
}

pub(crate) fn run_dir(output_root: &Path, model: &str, optimizer: OptimizerKind, seed: u64) -> PathBuf {
    output_root.join(model).join(optimizer.as_str()).join(seed.to_string())
}

pub(crate) fn train(config: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let kinds = parse_optimizers(args.optimizer.as_deref(), config.train.optimizer)?;
    let seed = args.seed.unwrap_or(config.train.global_seed);
    let root = &config.paths.dataset_root;
    let train_data = Dataset::from_layout(root, Split::Train)?;
    let val_data = Dataset::from_layout(root, Split::Validation)?;
    let test_data = Dataset::from_layout(root, Split::Test).ok().filter(|d| !d.is_empty());
    for kind in kinds {
        // The resolved config of every run reproduces it without flags.
        let mut resolved = config.clone();
        resolved.model = network_spec(config, args, seed)?;
        resolved.train.global_seed = seed;
        resolved.train.optimizer = kind;
        if let Some(epochs) = args.epochs {
            resolved.train.max_epochs = epochs;
            resolved.train.patience = resolved.train.patience.min(epochs);
        }
        resolved.validate()?;
        let train_config = resolved.train_config(kind);
        let mut model = build_network(&resolved.model, &weights(&resolved))?;
        let name = resolved.model.name();
        let dir = run_dir(&config.paths.output_root, &name, kind, seed);
        log::info!("training {name} with {kind}, seed {seed} -> {}", dir.display());
        let input = input_pipeline(&resolved, seed)?;
        let result = trainer::train(&mut model, &train_data, &val_data, &input, &train_config)?;
        let state = TrainingState {
            epoch: result.best_epoch.unwrap_or(0),
            optimizer: result.optimizer.clone(),
            history: result.history.clone(),
        };
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &model, &state)?;
        write(&dir.join(HISTORY_FILE), history_csv(&result.history))?;
        let (split, eval_data) = match &test_data {
            Some(d) => (Split::Test, d),
            None => (Split::Validation, &val_data),
        };
        trainer::predict(
            &model,
            eval_data,
            &input,
            train_config.batch_size,
            Some(&dir.join(PREDICTIONS_FILE)),
        )?;
        write(&dir.join(RESOLVED_CONFIG_FILE), resolved.to_toml())?;
        let summary = RunSummary {
            model: name.clone(),
            optimizer: kind.as_str().to_string(),
            optimizer_spec: result.optimizer.clone(),
            seed,
            frozen_prefix: model.store().frozen_prefix(),
            parameter_count: model.parameter_count(),
            trainable_parameter_count: model.trainable_parameter_count(),
            epochs_run: result.history.len(),
            best_epoch: result.best_epoch,
            stopped_early: result.stopped_early,
            prediction_split: split.as_str().to_string(),
        };
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        write(&dir.join(RUN_FILE), text)?;
        println!(
            "{name} / {kind} / seed {seed}: {} epoch(s), best epoch {}, predictions on {} split in {}",
            summary.epochs_run,
            summary.best_epoch.map_or("-".to_string(), |e| e.to_string()),
            summary.prediction_split,
            dir.display()
        );
    }
    Ok(())
}

pub(crate) fn predict(config: &RunConfig, args: &PredictArgs) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let input_dir = args
        .input
        .clone()
        .unwrap_or_else(|| config.paths.dataset_root.join(Split::Test.as_str()));
    let data = Dataset::from_dir(&input_dir)?;
    let input = input_pipeline(config, config.train.global_seed)?;
    let records = trainer::predict(&model, &data, &input, config.train.batch_size, Some(&args.output))?;
    println!("wrote {} prediction(s) to {}", records.len(), args.output.display());
    Ok(())
}
