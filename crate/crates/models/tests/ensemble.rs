use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastebench_models::graph::{Graph, Mode, Reduction};
use wastebench_models::{
    build_model, build_parallel_ensemble, Architecture, FusionMode, ModelError, ModelHandle, ModelSpec,
    ParallelEnsembleSpec, Tensor, WeightsSource,
};

fn random_batch(b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * 3 * 224 * 224;
    Tensor::new(vec![b, 3, 224, 224], (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect())
}

fn toy(seed: u64) -> ModelSpec {
    ModelSpec::new(Architecture::ToyCnn).with_seed(seed)
}

fn toy_ensemble(mode: FusionMode) -> ModelHandle {
    let spec = ParallelEnsembleSpec::new(toy(1), toy(2)).with_mode(mode).with_seed(3);
    build_parallel_ensemble(&spec, &WeightsSource::None).unwrap()
}

fn assert_log_probabilities(out: &Tensor) {
    for row in out.data.chunks(2) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(max <= 0.0, "{row:?}");
        let s: f64 = row.iter().map(|&v| f64::from(v).exp()).sum();
        assert!((s - 1.0).abs() <= 1e-5, "{row:?}");
    }
}

#[test]
fn toy_model_shape_contract() {
    let model = build_model(&toy(0), &WeightsSource::None).unwrap();
    assert!(model.parameter_count() > 0);
    let out = model.forward_logprobs(&random_batch(3, 1)).unwrap();
    assert_eq!(out.shape, vec![3, 2]);
    assert_log_probabilities(&out);
}

#[test]
fn unknown_architecture_and_wrong_shape_are_rejected() {
    assert_eq!(
        "resnet999".parse::<Architecture>(),
        Err(ModelError::UnknownArchitecture("resnet999".into()))
    );
    let model = build_model(&toy(0), &WeightsSource::None).unwrap();
    let bad = Tensor::zeros(&[1, 3, 200, 200]);
    assert!(matches!(model.forward_logprobs(&bad), Err(ModelError::ShapeMismatch { .. })));
}

#[test]
fn single_image_matches_its_row_in_a_batch() {
    for model in [
        build_model(&toy(4), &WeightsSource::None).unwrap(),
        build_model(&ModelSpec::new(Architecture::Mobilenetv2050), &WeightsSource::None).unwrap(),
    ] {
        let batch = random_batch(8, 9);
        let all = model.forward_logprobs(&batch).unwrap();
        let one = Tensor::new(vec![1, 3, 224, 224], batch.row(5).to_vec());
        let single = model.forward_logprobs(&one).unwrap();
        for (a, b) in single.data.iter().zip(&all.data[10..12]) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_output_layer_gives_uniform_probabilities() {
    let half = 0.5f32.ln();
    let mut single = build_model(&toy(5), &WeightsSource::None).unwrap();
    single.zero_output_layer();
    let mut ensemble = toy_ensemble(FusionMode::FeatureConcat);
    ensemble.zero_output_layer();
    for model in [single, ensemble] {
        let out = model.forward_logprobs(&random_batch(4, 11)).unwrap();
        assert!(out.data.iter().all(|&v| (v - half).abs() <= 1e-6), "{:?}", out.data);
    }
}

#[test]
fn fusion_widths() {
    assert_eq!(toy_ensemble(FusionMode::FeatureConcat).fusion_input_width(), Some(16));
    assert_eq!(toy_ensemble(FusionMode::LogitConcat).fusion_input_width(), Some(4));
    for mode in [FusionMode::FeatureConcat, FusionMode::LogitConcat] {
        let out = toy_ensemble(mode).forward_logprobs(&random_batch(2, 3)).unwrap();
        assert_eq!(out.shape, vec![2, 2]);
        assert_log_probabilities(&out);
    }
}

#[test]
fn ensemble_is_trainable_end_to_end() {
    let model = toy_ensemble(FusionMode::FeatureConcat);
    assert_eq!(model.trainable_parameter_count(), model.parameter_count());
}

fn ensemble_loss_and_grads(model: &ModelHandle, x: &Tensor, labels: &[usize]) -> (f64, wastebench_models::graph::Grads) {
    let mut g = Graph::new(model.store(), Mode::Eval);
    let xv = g.input(x.clone());
    let lp = model.forward(&mut g, xv);
    let loss = g.nll(lp, labels, Reduction::Sum);
    (g.loss_f64(loss), g.backward(loss))
}

#[test]
fn gradients_reach_both_backbones_and_the_fusion_layer() {
    let model = toy_ensemble(FusionMode::FeatureConcat);
    let x = random_batch(4, 21);
    let mut g = Graph::new(model.store(), Mode::Train(5));
    let xv = g.input(x);
    let lp = model.forward(&mut g, xv);
    let loss = g.nll(lp, &[0, 1, 1, 0], Reduction::Mean);
    assert!(g.loss_f64(loss) > 0.0);
    let grads = g.backward(loss);
    for prefix in ["a.", "b.", "fc1."] {
        let norm = grads.norm(model.params_with_prefix(prefix));
        assert!(norm > 0.0 && norm.is_finite(), "{prefix}: {norm}");
    }
}

#[test]
fn fusion_weight_gradients_match_finite_differences() {
    let mut model = toy_ensemble(FusionMode::FeatureConcat);
    let x = random_batch(4, 31);
    let labels = [1, 0, 0, 1];
    let (_, grads) = ensemble_loss_and_grads(&model, &x, &labels);
    let w = model.output_layer_params()[0];
    let analytic = grads.get(w).unwrap().to_vec();
    let numel = model.store().params[w].value.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-2f32;
    for _ in 0..10 {
        let i = rng.random_range(0..numel);
        let orig = model.store().params[w].value.data[i];
        model.store_mut().params[w].value.data[i] = orig + eps;
        let (up, _) = ensemble_loss_and_grads(&model, &x, &labels);
        model.store_mut().params[w].value.data[i] = orig - eps;
        let (down, _) = ensemble_loss_and_grads(&model, &x, &labels);
        model.store_mut().params[w].value.data[i] = orig;
        let numeric = (up - down) / (2.0 * f64::from(eps));
        let a = f64::from(analytic[i]);
        let rel = (numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-3);
        assert!(rel <= 1e-3, "weight {i}: analytic {a}, numeric {numeric}");
    }
}

#[test]
fn concatenation_is_not_averaging() {
    let ensemble = toy_ensemble(FusionMode::FeatureConcat);
    // Standalone models sharing the ensemble's backbones, each with its own head.
    let standalone = |prefix: &str, seed: u64| {
        let mut m = build_model(&toy(seed), &WeightsSource::None).unwrap();
        let owned: Vec<(String, Tensor)> = ensemble
            .named_tensors()
            .into_iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect();
        let own_head: Vec<(String, Tensor)> = m
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        m.load_named_tensors(|n| owned.iter().chain(&own_head).find(|(k, _)| k == n).map(|(_, t)| t))
            .unwrap();
        m
    };
    let (ma, mb) = (standalone("a.", 1), standalone("b.", 2));
    let x = random_batch(3, 41);
    let fused = ensemble.forward_logprobs(&x).unwrap();
    let (pa, pb) = (ma.forward_logprobs(&x).unwrap(), mb.forward_logprobs(&x).unwrap());
    // The two heads disagree, so an average is a real blend.
    assert!(pa.data.iter().zip(&pb.data).any(|(a, b)| (a - b).abs() > 1e-3));
    let mean: Vec<f32> = pa.data.iter().zip(&pb.data).map(|(a, b)| (a.exp() + b.exp()) / 2.0).collect();
    let diff = fused
        .data
        .iter()
        .zip(&mean)
        .map(|(f, m)| (f.exp() - m).abs())
        .fold(0.0f32, f32::max);
    assert!(diff > 1e-3, "fused output equals the average of the heads");
}

#[test]
fn freezing_counts() {
    let mut m = build_model(&ModelSpec::new(Architecture::Mobilenetv2050), &WeightsSource::None).unwrap();
    assert_eq!(m.trainable_parameter_count(), m.parameter_count());
    m.freeze_prefix(10).unwrap();
    assert!(m.trainable_parameter_count() < m.parameter_count());
    let frozen: Vec<bool> = m.describe().iter().map(|d| d.frozen).collect();
    assert!(frozen[..10].iter().all(|&f| f) && frozen[10..].iter().all(|&f| !f));
    m.freeze_prefix(0).unwrap();
    assert_eq!(m.trainable_parameter_count(), m.parameter_count());
    let layers = m.layer_count();
    assert_eq!(
        m.freeze_prefix(layers + 1),
        Err(ModelError::PrefixOutOfRange {
            requested: layers + 1,
            layers
        })
    );
    m.freeze_prefix(layers).unwrap();
    assert_eq!(m.trainable_parameter_count(), 0);
}

#[test]
fn frozen_prefix_from_spec_matches_freeze_call() {
    let a = build_model(&toy(0).with_frozen_prefix(3), &WeightsSource::None).unwrap();
    let mut b = build_model(&toy(0), &WeightsSource::None).unwrap();
    b.freeze_prefix(3).unwrap();
    assert_eq!(a.trainable_parameter_count(), b.trainable_parameter_count());
    assert_eq!(a.spec(), b.spec());
}
