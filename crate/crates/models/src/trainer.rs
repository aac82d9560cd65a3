//! Training loop with early stopping, and batch prediction.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wastebench_core::predictions::{write_prediction_file, PredictionError};
use wastebench_core::{Label, PredictionRecord};

use crate::checkpoint::{read_archive, write_archive, ArchiveError};
use crate::data::{DataError, Dataset, InputPipeline};
use crate::graph::{Graph, Mode, Reduction};
use crate::model::{build_network, ModelHandle, NetworkSpec, WeightsSource};
use crate::optim::{build_optimizer, OptimError, OptimizerKind, OptimizerSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Lower validation loss is better.
    #[default]
    ValLoss,
    /// Higher validation accuracy is better.
    ValAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub input_channels: usize,
    pub optimizer: OptimizerSpec,
    pub global_seed: u64,
    /// Accepted and recorded; computation stays in f32.
    pub mixed_precision: bool,
    pub reduction: Reduction,
    pub monitor: Monitor,
    /// Accepted and recorded but not used by the loop.
    pub n_steps: Option<u64>,
    /// Threads for data preparation and kernels; 0 uses all cores.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            max_epochs: 100,
            patience: 20,
            folds: 1,
            input_channels: 3,
            optimizer: OptimizerSpec::new(OptimizerKind::Adamw),
            global_seed: 0,
            mixed_precision: false,
            reduction: Reduction::Mean,
            monitor: Monitor::ValLoss,
            n_steps: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.folds != 1 {
            return bad(format!("only a single fixed split is supported, got folds = {}", self.folds));
        }
        if self.input_channels != 3 {
            return bad(format!("input_channels must be 3, got {}", self.input_channels));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("{0} contains unlabeled samples")]
    MissingLabels(&'static str),
    #[error("training diverged at epoch {epoch}: {what} is {value}")]
    DivergedTraining { epoch: usize, what: &'static str, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Optimizer(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
}

/// Outcome of [`EarlyStopping::observe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub monitor: Monitor,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, monitor: Monitor) -> EarlyStopping {
        EarlyStopping {
            patience,
            monitor,
            best: None,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, record: &EpochRecord) -> StopDecision {
        let value = match self.monitor {
            Monitor::ValLoss => record.val_loss,
            Monitor::ValAccuracy => record.val_accuracy,
        };
        let better = match (self.best, self.monitor) {
            (None, _) => true,
            (Some(b), Monitor::ValLoss) => value < b,
            (Some(b), Monitor::ValAccuracy) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored into the model.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub optimizer: String,
}

/// `epoch,train_loss,val_loss,val_accuracy` with six decimals.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    }
    out
}

/// Labels of every sample, or an error naming the dataset role.
fn labels_of(data: &Dataset, role: &'static str) -> Result<Vec<usize>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset(role));
    }
    data.samples()
        .iter()
        .map(|s| s.label.map(Label::index).ok_or(TrainError::MissingLabels(role)))
        .collect()
}

fn mix(a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

struct Snapshot {
    params: Vec<Tensor>,
    buffers: Vec<Tensor>,
}

impl Snapshot {
    fn take(model: &ModelHandle) -> Snapshot {
        Snapshot {
            params: model.store().params.iter().map(|p| p.value.clone()).collect(),
            buffers: model.store().buffers.iter().map(|b| b.value.clone()).collect(),
        }
    }

    fn restore(self, model: &mut ModelHandle) {
        let store = model.store_mut();
        for (p, v) in store.params.iter_mut().zip(self.params) {
            p.value = v;
        }
        for (b, v) in store.buffers.iter_mut().zip(self.buffers) {
            b.value = v;
        }
    }
}

/// Mean loss and accuracy of `model` on `data` in evaluation mode.
pub fn evaluate_loss(
    model: &ModelHandle,
    data: &Dataset,
    input: &InputPipeline,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let labels = labels_of(data, "evaluation")?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = input.batch(data, chunk, None)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new(model.store(), Mode::Eval);
        let xv = g.input(x);
        let lp = model.forward(&mut g, xv);
        let l = g.nll(lp, &y, Reduction::Sum);
        loss += g.loss_f64(l);
        for (row, &label) in g.value(lp).data.chunks(2).zip(&y) {
            let predicted = usize::from(row[1] > row[0]);
            correct += usize::from(predicted == label);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Fit `model` on `train`, early-stopping on `val`, and restore the
/// parameters of the best epoch.
pub fn train(
    model: &mut ModelHandle,
    train: &Dataset,
    val: &Dataset,
    input: &InputPipeline,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    if config.mixed_precision {
        log::warn!("mixed_precision is accepted but has no effect; training runs in f32");
    }
    let train_labels = labels_of(train, "training")?;
    labels_of(val, "validation")?;
    let mut optimizer = build_optimizer(&config.optimizer, config.learning_rate, model.store().params.len())?;
    let mut result = TrainResult {
        history: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        optimizer: config.optimizer.identifier(),
    };
    if config.max_epochs == 0 {
        return Ok(result);
    }
    let mut input = input.clone();
    input.seed = config.global_seed;
    let mut stopper = EarlyStopping::new(config.patience, config.monitor);
    let mut best: Option<Snapshot> = None;
    for epoch in 1..=config.max_epochs {
        optimizer.begin_epoch(epoch - 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.global_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = with_workers(config.workers, || input.batch(train, chunk, Some(epoch as u64)))?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let seed = mix(mix(config.global_seed, epoch as u64), bi as u64);
            let (loss, grads, updates) = with_workers(config.workers, || {
                let mut g = Graph::new(model.store(), Mode::Train(seed));
                let xv = g.input(x);
                let lp = model.forward(&mut g, xv);
                let l = g.nll(lp, &y, config.reduction);
                let loss = g.loss_f64(l);
                let grads = g.backward(l);
                (loss, grads, g.take_buffer_updates())
            });
            if !loss.is_finite() {
                return Err(TrainError::DivergedTraining {
                    epoch,
                    what: "training loss",
                    value: loss,
                });
            }
            loss_sum += match config.reduction {
                Reduction::Mean => loss * chunk.len() as f64,
                Reduction::Sum => loss,
            };
            optimizer.step(model.store_mut(), &grads);
            model.store_mut().apply_buffer_updates(updates);
        }
        let (val_loss, val_accuracy) =
            with_workers(config.workers, || evaluate_loss(model, val, &input, config.batch_size))?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedTraining {
                epoch,
                what: "validation loss",
                value: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_loss {:.6} val_accuracy {:.4} lr {:.3e}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            optimizer.lr()
        );
        let decision = stopper.observe(epoch, &record);
        result.history.push(record);
        match decision {
            StopDecision::Improved => best = Some(Snapshot::take(model)),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                result.stopped_early = true;
                break;
            }
        }
    }
    if let Some(snapshot) = best {
        snapshot.restore(model);
    }
    result.best_epoch = stopper.best_epoch();
    Ok(result)
}

/// Class probabilities for every sample, sorted by name, optionally
/// written as a prediction file.
pub fn predict(
    model: &ModelHandle,
    data: &Dataset,
    input: &InputPipeline,
    batch_size: usize,
    output: Option<&Path>,
) -> Result<Vec<PredictionRecord>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("prediction"));
    }
    let sorted = data.sorted_by_name();
    let indices: Vec<usize> = (0..sorted.len()).collect();
    let mut records = Vec::with_capacity(sorted.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = input.batch(&sorted, chunk, None)?;
        let lp = model.forward_logprobs(&x)?;
        for (&i, row) in chunk.iter().zip(lp.data.chunks(2)) {
            let (n, p) = (f64::from(row[0]).exp(), f64::from(row[1]).exp());
            let total = n + p;
            let sample = &sorted.samples()[i];
            let mut record = PredictionRecord::new(sample.name.clone(), n / total, p / total);
            if let Some(label) = sample.label {
                record = record.with_label(label);
            }
            records.push(record);
        }
    }
    if let Some(path) = output {
        write_prediction_file(path, &records)?;
    }
    Ok(records)
}

/// Training-state metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub optimizer: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: NetworkSpec,
    frozen_layers: Vec<String>,
    state: TrainingState,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Write the network spec, frozen layers, training state and every
/// parameter and buffer.
pub fn save_checkpoint(path: &Path, model: &ModelHandle, state: &TrainingState) -> Result<(), CheckpointError> {
    let store = model.store();
    let meta = CheckpointMeta {
        spec: model.spec().clone(),
        frozen_layers: (0..store.layer_count())
            .filter(|&i| store.is_layer_frozen(i))
            .map(|i| store.layers[i].name.clone())
            .collect(),
        state: state.clone(),
    };
    write_archive(path, &serde_json::to_value(&meta)?, &model.named_tensors())?;
    Ok(())
}

/// Rebuild the network from the stored spec without fetching pretrained
/// weights, then load the stored tensors.
pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, TrainingState), CheckpointError> {
    let archive = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())?;
    let spec = match meta.spec {
        NetworkSpec::Single(s) => NetworkSpec::Single(s.pretrained(false)),
        NetworkSpec::ParallelEnsemble(mut e) => {
            e.backbone_a.pretrained = false;
            e.backbone_b.pretrained = false;
            NetworkSpec::ParallelEnsemble(e)
        }
    };
    let mut model = build_network(&spec, &WeightsSource::None)?;
    model.load_named_tensors(|name| archive.get(name))?;
    let store = model.store_mut();
    let frozen: Vec<usize> = (0..store.layer_count())
        .filter(|&i| meta.frozen_layers.contains(&store.layers[i].name))
        .collect();
    store.set_frozen_prefix(0);
    for i in frozen {
        store.freeze_range(i, 1);
    }
    Ok((model, meta.state))
}
