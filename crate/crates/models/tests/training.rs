use std::fs;

use proptest::prelude::*;
use wastebench_core::pipeline::{AugmentationRanges, NormalizationStats};
use wastebench_models::data::{Dataset, InputPipeline};
use wastebench_models::graph::Reduction;
use wastebench_models::loss::{log_softmax, log_softmax_nll_grad, nll_loss};
use wastebench_models::optim::{build_optimizer, warm_restart_lr, OptimError, OptimizerKind, OptimizerSpec};
use wastebench_models::params::ParamStore;
use wastebench_models::trainer::{
    evaluate_loss, history_csv, load_checkpoint, predict, save_checkpoint, train, EarlyStopping, EpochRecord,
    Monitor, StopDecision, TrainConfig, TrainError, TrainingState,
};
use wastebench_models::{build_model, Architecture, ModelHandle, ModelSpec, WeightsSource};

fn input() -> InputPipeline {
    InputPipeline::new(NormalizationStats::new([0.5; 3], [0.25; 3]).unwrap())
}

fn toy(seed: u64) -> ModelHandle {
    build_model(&ModelSpec::new(Architecture::ToyCnn).with_seed(seed), &WeightsSource::None).unwrap()
}

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-2,
        max_epochs: epochs,
        patience: epochs,
        global_seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_model_fits_separable_data() {
    let data = Dataset::synthetic_bright_dark(64, 1);
    let val = Dataset::synthetic_bright_dark(16, 2);
    let mut model = toy(0);
    let result = train(&mut model, &data, &val, &input(), &toy_config(5)).unwrap();
    assert_eq!(result.history.len(), 5);
    let (_, accuracy) = evaluate_loss(&model, &data, &input(), 16).unwrap();
    eprintln!("{}", history_csv(&result.history));
    assert!(accuracy >= 0.95, "train accuracy {accuracy}");
}

#[test]
fn frozen_prefix_is_bit_identical_after_an_epoch() {
    let data = Dataset::synthetic_bright_dark(16, 3);
    let mut model = toy(1);
    model.freeze_prefix(4).unwrap();
    let before = model.store().clone();
    train(&mut model, &data, &data, &input(), &toy_config(1)).unwrap();
    let after = model.store();
    let mut changed = 0;
    for (p, q) in before.params.iter().zip(&after.params) {
        let same = p.value.data.iter().zip(&q.value.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if before.is_trainable(before.param_index(&p.name).unwrap()) {
            changed += usize::from(!same);
        } else {
            assert!(same, "{} moved while frozen", p.name);
        }
    }
    assert!(changed > 0);
}

#[test]
fn fully_frozen_model_does_not_move() {
    let mut model = toy(2);
    let layers = model.layer_count();
    model.freeze_prefix(layers).unwrap();
    let before = model.store().clone();
    let data = Dataset::synthetic_bright_dark(8, 4);
    train(&mut model, &data, &data, &input(), &toy_config(1)).unwrap();
    for (p, q) in before.params.iter().zip(&model.store().params) {
        assert!(p.value.data.iter().zip(&q.value.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let data = Dataset::synthetic_bright_dark(4, 5);
    let mut model = toy(3);
    let before = model.store().clone();
    let config = TrainConfig {
        max_epochs: 0,
        ..toy_config(1)
    };
    let result = train(&mut model, &data, &data, &input(), &config).unwrap();
    assert!(result.history.is_empty());
    assert_eq!(result.best_epoch, None);
    assert_eq!(before.params.len(), model.store().params.len());
    for (p, q) in before.params.iter().zip(&model.store().params) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn empty_datasets_are_rejected() {
    let data = Dataset::synthetic_bright_dark(4, 5);
    let empty = Dataset::default();
    let mut model = toy(3);
    assert!(matches!(
        train(&mut model, &empty, &data, &input(), &toy_config(1)),
        Err(TrainError::EmptyDataset(_))
    ));
    assert!(matches!(
        train(&mut model, &data, &empty, &input(), &toy_config(1)),
        Err(TrainError::EmptyDataset(_))
    ));
}

#[test]
fn divergence_is_reported() {
    let data = Dataset::synthetic_bright_dark(8, 6);
    let mut model = toy(4);
    let config = TrainConfig {
        learning_rate: 1e30,
        optimizer: OptimizerSpec::new(OptimizerKind::SgdWarmRestarts),
        ..toy_config(3)
    };
    let err = train(&mut model, &data, &data, &input(), &config).unwrap_err();
    assert!(matches!(err, TrainError::DivergedTraining { .. }), "{err}");
}

fn run(workers: usize) -> (Vec<EpochRecord>, Vec<u32>) {
    let data = Dataset::synthetic_bright_dark(24, 7);
    let val = Dataset::synthetic_bright_dark(8, 8);
    let mut pipeline = input();
    pipeline.augmentation = Some(AugmentationRanges::default());
    let mut model = toy(5);
    let config = TrainConfig {
        workers,
        ..toy_config(2)
    };
    let result = train(&mut model, &data, &val, &pipeline, &config).unwrap();
    let bits = model
        .store()
        .params
        .iter()
        .flat_map(|p| p.value.data.iter().map(|v| v.to_bits()))
        .collect();
    (result.history, bits)
}

#[test]
fn training_is_deterministic_across_runs_and_worker_counts() {
    let (h1, p1) = run(1);
    let (h2, p2) = run(1);
    let (h4, p4) = run(4);
    assert_eq!(history_csv(&h1), history_csv(&h2));
    assert_eq!(p1, p2);
    assert_eq!(h1, h4);
    assert_eq!(p1, p4);
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::synthetic_bright_dark(12, 9);
    let mut model = toy(6);
    model.freeze_prefix(2).unwrap();
    let result = train(&mut model, &data, &data, &input(), &toy_config(1)).unwrap();
    let before = dir.path().join("before.csv");
    let records = predict(&model, &data, &input(), 5, Some(&before)).unwrap();
    assert_eq!(records.len(), 12);
    for r in &records {
        assert!((r.p_negative + r.p_positive - 1.0).abs() <= 1e-6);
    }
    let state = TrainingState {
        epoch: 1,
        optimizer: result.optimizer.clone(),
        history: result.history.clone(),
    };
    let ckpt = dir.path().join("model.wbck");
    save_checkpoint(&ckpt, &model, &state).unwrap();
    let (loaded, loaded_state) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded_state, state);
    assert_eq!(loaded.spec(), model.spec());
    assert_eq!(loaded.trainable_parameter_count(), model.trainable_parameter_count());
    let after = dir.path().join("after.csv");
    predict(&loaded, &data, &input(), 3, Some(&after)).unwrap();
    let again = dir.path().join("again.csv");
    predict(&loaded, &data, &input(), 12, Some(&again)).unwrap();
    let bytes = fs::read(&before).unwrap();
    assert_eq!(bytes, fs::read(&after).unwrap());
    assert_eq!(bytes, fs::read(&again).unwrap());
}

#[test]
fn zero_head_predicts_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::synthetic_bright_dark(3, 10);
    let mut model = toy(7);
    model.zero_output_layer();
    let records = predict(&model, &data, &input(), 2, Some(&dir.path().join("p.csv"))).unwrap();
    assert_eq!(records.len(), 3);
    for r in records {
        assert!((r.p_positive - 0.5).abs() <= 1e-6 && (r.p_negative - 0.5).abs() <= 1e-6);
    }
}

// Loss

#[test]
fn nll_worked_examples() {
    assert_eq!(nll_loss(&[0.0, f64::NEG_INFINITY], &[0], 2, Reduction::Sum).unwrap(), 0.0);
    assert_eq!(nll_loss(&[-2.0, -0.1], &[0], 2, Reduction::Sum).unwrap(), 2.0);
    let lp = [0.5f64.ln(), 0.5f64.ln(), 0.75f64.ln(), 0.25f64.ln()];
    let sum = nll_loss(&lp, &[1, 1], 2, Reduction::Sum).unwrap();
    let mean = nll_loss(&lp, &[1, 1], 2, Reduction::Mean).unwrap();
    assert!((sum - 2.079442).abs() < 1e-6, "{sum}");
    assert!((mean - 1.039721).abs() < 1e-6, "{mean}");
}

proptest! {
    #[test]
    fn nll_gradient_matches_finite_differences(
        logits in prop::collection::vec(-4.0f64..4.0, 8),
        labels in prop::collection::vec(0usize..2, 4),
    ) {
        let analytic = log_softmax_nll_grad(&logits, &labels, 2, Reduction::Mean).unwrap();
        let loss = |z: &[f64]| nll_loss(&log_softmax(z, 2), &labels, 2, Reduction::Mean).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += h;
            let mut down = logits.clone();
            down[i] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            // Independent oracle: (softmax - onehot) / B.
            let row = &logits[i / 2 * 2..i / 2 * 2 + 2];
            let m = row[0].max(row[1]);
            let p = (row[i % 2] - m).exp() / row.iter().map(|v| (v - m).exp()).sum::<f64>();
            let oracle = (p - f64::from(u8::from(labels[i / 2] == i % 2))) / 4.0;
            prop_assert!((analytic[i] - oracle).abs() <= 1e-12);
            let scale = oracle.abs().max(1e-3);
            prop_assert!((numeric - analytic[i]).abs() / scale <= 1e-4, "{} vs {}", numeric, analytic[i]);
        }
    }

    #[test]
    fn early_stopping_bounds_epochs(
        losses in prop::collection::vec(0.0f64..1.0, 1..60),
        patience in 1usize..8,
    ) {
        let mut s = EarlyStopping::new(patience, Monitor::ValLoss);
        let mut executed = 0;
        for (i, &l) in losses.iter().enumerate() {
            executed = i + 1;
            let r = EpochRecord { epoch: i + 1, train_loss: l, val_loss: l, val_accuracy: 0.0 };
            if s.observe(i + 1, &r) == StopDecision::Stop {
                break;
            }
        }
        let best = s.best_epoch().unwrap();
        prop_assert!(executed <= best + patience + 1);
        let best_loss = losses[..executed].iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(s.best_value(), Some(best_loss));
    }
}

// Optimizers

fn quadratic_store(x0: &[f32]) -> ParamStore {
    let mut store = ParamStore::default();
    store.params.push(wastebench_models::params::Param {
        name: "x".into(),
        value: wastebench_models::Tensor::new(vec![x0.len()], x0.to_vec()),
        layer: 0,
    });
    store
}

#[test]
fn adamw_minimizes_a_convex_quadratic() {
    // f(x) = sum a_i (x_i - c_i)^2 with its minimum 0 at c.
    let a = [1.0f32, 3.0, 0.5, 2.0];
    let c = [0.5f32, -1.0, 2.0, 0.0];
    let f = |x: &[f32]| -> f64 { x.iter().zip(&a).zip(&c).map(|((x, a), c)| f64::from(a * (x - c) * (x - c))).sum() };
    let mut store = quadratic_store(&[3.0, 2.0, -2.0, -3.0]);
    let start = f(&store.params[0].value.data);
    let mut opt = build_optimizer(&OptimizerSpec::new(OptimizerKind::Adamw), 0.1, 1).unwrap();
    for _ in 0..100 {
        let x = &store.params[0].value.data;
        let g: Vec<f32> = x.iter().zip(&a).zip(&c).map(|((x, a), c)| 2.0 * a * (x - c)).collect();
        let grads = wastebench_models::graph::Grads { params: vec![Some(g)] };
        opt.step(&mut store, &grads);
    }
    let end = f(&store.params[0].value.data);
    assert!(end <= 0.1 * start, "{start} -> {end}");
}

#[test]
fn every_optimizer_descends_on_the_quadratic() {
    for kind in OptimizerKind::ALL {
        let mut store = quadratic_store(&[2.0, -2.0]);
        let mut opt = build_optimizer(&OptimizerSpec::new(kind), 0.05, 1).unwrap();
        for epoch in 0..4 {
            opt.begin_epoch(epoch);
            for _ in 0..25 {
                let g: Vec<f32> = store.params[0].value.data.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut store, &wastebench_models::graph::Grads { params: vec![Some(g)] });
            }
        }
        let end: f32 = store.params[0].value.data.iter().map(|x| x * x).sum();
        assert!(end < 8.0 * 0.5, "{kind:?}: {end}");
    }
}

#[test]
fn warm_restarts_return_to_peak() {
    let lrs: Vec<f64> = (0..20).map(|e| warm_restart_lr(0.1, 0.0, 4, 2, e)).collect();
    let peaks: Vec<usize> = (1..20).filter(|&e| lrs[e] > lrs[e - 1]).collect();
    assert_eq!(peaks, vec![4, 12]);
    for e in [0, 4, 12] {
        assert!((lrs[e] - 0.1).abs() < 1e-12);
    }
    // Closed form inside the first period.
    let t = 0.5 * 0.1 * (1.0 + (std::f64::consts::PI * 2.0 / 4.0).cos());
    assert!((lrs[2] - t).abs() < 1e-12);
}

#[test]
fn optimizer_guards() {
    assert_eq!(
        "adagrad".parse::<OptimizerKind>(),
        Err(OptimError::UnknownOptimizer("adagrad".into()))
    );
    let mut spec = OptimizerSpec::new(OptimizerKind::Ranger);
    spec.hyperparams.remove("lookahead_k");
    assert!(matches!(build_optimizer(&spec, 0.1, 1), Err(OptimError::MissingHyperparam { .. })));
}
