//! Model registry, single-backbone classifiers and the parallel ensemble.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{self, Backbone};
use crate::checkpoint::{self, ArchiveError};
use crate::graph::{Graph, Mode, Var};
use crate::params::{Builder, InitScheme, Linear, ParamStore};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "mobilenetv2_050")]
    Mobilenetv2050,
    #[serde(rename = "mobilenetv2_100")]
    Mobilenetv2100,
    #[serde(rename = "densenet121")]
    Densenet121,
    #[serde(rename = "squeezenet1_0")]
    Squeezenet10,
    #[serde(rename = "googlenet")]
    Googlenet,
    #[serde(rename = "mobilevit_xs")]
    MobilevitXs,
    #[serde(rename = "vit_tiny_r_s16_p8_224")]
    VitTinyRS16P8224,
    /// Synthetic test network, not a published architecture.
    #[serde(rename = "toy_cnn")]
    ToyCnn,
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::Mobilenetv2050,
        Architecture::Mobilenetv2100,
        Architecture::Densenet121,
        Architecture::Squeezenet10,
        Architecture::Googlenet,
        Architecture::MobilevitXs,
        Architecture::VitTinyRS16P8224,
        Architecture::ToyCnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Mobilenetv2050 => "mobilenetv2_050",
            Architecture::Mobilenetv2100 => "mobilenetv2_100",
            Architecture::Densenet121 => "densenet121",
            Architecture::Squeezenet10 => "squeezenet1_0",
            Architecture::Googlenet => "googlenet",
            Architecture::MobilevitXs => "mobilevit_xs",
            Architecture::VitTinyRS16P8224 => "vit_tiny_r_s16_p8_224",
            Architecture::ToyCnn => "toy_cnn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub frozen_prefix: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input")]
    pub input_size: usize,
    /// Seed of the random initialization.
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    NUM_CLASSES
}

fn default_input() -> usize {
    INPUT_SIZE
}

impl ModelSpec {
    pub fn new(architecture: Architecture) -> ModelSpec {
        ModelSpec {
            architecture,
            pretrained: false,
            frozen_prefix: 0,
            num_classes: NUM_CLASSES,
            input_size: INPUT_SIZE,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_frozen_prefix(mut self, n: usize) -> Self {
        self.frozen_prefix = n;
        self
    }

    pub fn pretrained(mut self, yes: bool) -> Self {
        self.pretrained = yes;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenate pooled backbone features.
    #[default]
    FeatureConcat,
    /// Concatenate each backbone's own two-class logits.
    LogitConcat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelEnsembleSpec {
    pub backbone_a: ModelSpec,
    pub backbone_b: ModelSpec,
    #[serde(default)]
    pub fusion_mode: FusionMode,
    #[serde(default = "default_classes")]
    pub fusion_out: usize,
    /// Seed of the fusion layer initialization.
    #[serde(default)]
    pub seed: u64,
}

impl ParallelEnsembleSpec {
    /// The mobilevit_xs + vit_tiny_r_s16_p8_224 pairing.
    pub fn standard() -> ParallelEnsembleSpec {
        ParallelEnsembleSpec::new(
            ModelSpec::new(Architecture::MobilevitXs),
            ModelSpec::new(Architecture::VitTinyRS16P8224),
        )
    }

    pub fn new(backbone_a: ModelSpec, backbone_b: ModelSpec) -> ParallelEnsembleSpec {
        ParallelEnsembleSpec {
            backbone_a,
            backbone_b,
            fusion_mode: FusionMode::FeatureConcat,
            fusion_out: NUM_CLASSES,
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Either kind of buildable network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    Single(ModelSpec),
    ParallelEnsemble(ParallelEnsembleSpec),
}

impl NetworkSpec {
    /// Short name used for output directories and reports.
    pub fn name(&self) -> String {
        match self {
            NetworkSpec::Single(s) => s.architecture.to_string(),
            NetworkSpec::ParallelEnsemble(_) => "parallel_ensemble".to_string(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            NetworkSpec::Single(s) => s.input_size,
            NetworkSpec::ParallelEnsemble(e) => e.backbone_a.input_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightsFailure {
    /// Pretrained weights requested without a registry.
    NotConfigured,
    /// The registry has no file for the architecture.
    Missing(PathBuf),
    /// The file exists but cannot be read.
    Io(String),
    /// The file does not match the architecture.
    Incompatible(String),
}

impl fmt::Display for WeightsFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsFailure::NotConfigured => f.write_str("no weights registry configured"),
            WeightsFailure::Missing(p) => write!(f, "no weights file at {}", p.display()),
            WeightsFailure::Io(m) => write!(f, "cannot read weights: {m}"),
            WeightsFailure::Incompatible(m) => write!(f, "incompatible weights: {m}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("pretrained weights for {architecture} unavailable: {failure}")]
    WeightsUnavailable {
        architecture: Architecture,
        failure: WeightsFailure,
    },
    #[error("frozen prefix {requested} exceeds the {layers} parameterized layers")]
    PrefixOutOfRange { requested: usize, layers: usize },
    #[error("expected input of shape {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

/// Where pretrained backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum WeightsSource {
    #[default]
    None,
    /// Directory holding one `<architecture>.wbck` archive per backbone.
    Registry(PathBuf),
}

impl WeightsSource {
    pub fn path_for(dir: &Path, arch: Architecture) -> PathBuf {
        dir.join(format!("{arch}.wbck"))
    }
}

struct Classifier {
    dropout: f32,
    linear: Linear,
}

impl Classifier {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = g.dropout(x, self.dropout);
        g.linear(x, &self.linear)
    }
}

enum Network {
    Single {
        backbone: Box<dyn Backbone>,
        head: Classifier,
    },
    Ensemble {
        a: Box<dyn Backbone>,
        b: Box<dyn Backbone>,
        /// Per-backbone classifiers, present in logit mode.
        heads: Option<(Classifier, Classifier)>,
        fc1: Linear,
    },
}

/// A built network with its parameters.
pub struct ModelHandle {
    spec: NetworkSpec,
    store: ParamStore,
    net: Network,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("spec", &self.spec)
            .field("parameter_count", &self.parameter_count())
            .field("trainable_parameter_count", &self.trainable_parameter_count())
            .finish()
    }
}

/// One row of [`ModelHandle::describe`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerDescription {
    pub index: usize,
    pub name: String,
    pub kind: &'static str,
    pub parameters: usize,
    pub frozen: bool,
}

fn validate(spec: &ModelSpec) -> Result<(), ModelError> {
    if spec.num_classes != NUM_CLASSES {
        return Err(ModelError::InvalidSpec(format!(
            "num_classes must be {NUM_CLASSES}, got {}",
            spec.num_classes
        )));
    }
    if spec.input_size != INPUT_SIZE {
        return Err(ModelError::InvalidSpec(format!(
            "input_size must be {INPUT_SIZE}, got {}",
            spec.input_size
        )));
    }
    Ok(())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Build a backbone under `prefix` and return it with its layer range.
fn build_backbone(
    store: &mut ParamStore,
    spec: &ModelSpec,
    prefix: Option<&str>,
    stream: u64,
) -> (arch::Recipe, std::ops::Range<usize>) {
    let mut rng = rng_for(spec.seed, stream);
    let start = store.layer_count();
    let mut b = Builder::new(store, &mut rng, arch::scheme(spec.architecture));
    let recipe = match prefix {
        Some(p) => b.with_prefix(p, |b| arch::build(spec.architecture, b)),
        None => arch::build(spec.architecture, &mut b),
    };
    let end = store.layer_count();
    (recipe, start..end)
}

fn build_head(store: &mut ParamStore, scheme: InitScheme, name: &str, width: usize, seed: u64, stream: u64) -> Linear {
    let mut rng = rng_for(seed, stream);
    Builder::new(store, &mut rng, scheme).linear(name, width, NUM_CLASSES)
}

/// Copy backbone tensors from the registry into `store`. Parameters under
/// `prefix` named like the archive entries are overwritten; the classifier
/// is left at its random initialization.
fn load_pretrained(
    store: &mut ParamStore,
    spec: &ModelSpec,
    prefix: &str,
    layers: std::ops::Range<usize>,
    source: &WeightsSource,
) -> Result<(), ModelError> {
    let fail = |failure| ModelError::WeightsUnavailable {
        architecture: spec.architecture,
        failure,
    };
    let WeightsSource::Registry(dir) = source else {
        return Err(fail(WeightsFailure::NotConfigured));
    };
    let path = WeightsSource::path_for(dir, spec.architecture);
    if !path.exists() {
        return Err(fail(WeightsFailure::Missing(path)));
    }
    let archive = checkpoint::read_archive(&path).map_err(|e| match e {
        ArchiveError::Io { source, .. } => fail(WeightsFailure::Io(source.to_string())),
        ArchiveError::Corrupt(m) => fail(WeightsFailure::Incompatible(m)),
    })?;
    for layer in layers {
        let info = store.layers[layer].clone();
        for &pid in &info.params {
            let name = store.params[pid].name.strip_prefix(prefix).unwrap_or(&store.params[pid].name).to_string();
            let t = archive
                .get(&name)
                .ok_or_else(|| fail(WeightsFailure::Incompatible(format!("missing tensor {name}"))))?;
            if t.shape != store.params[pid].value.shape {
                return Err(fail(WeightsFailure::Incompatible(format!(
                    "{name}: shape {:?} != {:?}",
                    t.shape, store.params[pid].value.shape
                ))));
            }
            store.params[pid].value = t.clone();
        }
        for &bid in &info.buffers {
            let name = store.buffers[bid].name.strip_prefix(prefix).unwrap_or(&store.buffers[bid].name).to_string();
            if let Some(t) = archive.get(&name).filter(|t| t.shape == store.buffers[bid].value.shape) {
                store.buffers[bid].value = t.clone();
            }
        }
    }
    Ok(())
}

fn check_prefix(n: usize, layers: usize) -> Result<(), ModelError> {
    if n > layers {
        return Err(ModelError::PrefixOutOfRange { requested: n, layers });
    }
    Ok(())
}

/// Build one backbone with a fresh two-class head.
pub fn build_model(spec: &ModelSpec, weights: &WeightsSource) -> Result<ModelHandle, ModelError> {
    validate(spec)?;
    let mut store = ParamStore::default();
    let (recipe, layers) = build_backbone(&mut store, spec, None, 0);
    if spec.pretrained {
        load_pretrained(&mut store, spec, "", layers, weights)?;
    }
    let width = recipe.backbone.feature_width();
    let linear = build_head(&mut store, arch::scheme(spec.architecture), "head", width, spec.seed, 1);
    check_prefix(spec.frozen_prefix, store.layer_count())?;
    store.set_frozen_prefix(spec.frozen_prefix);
    Ok(ModelHandle {
        spec: NetworkSpec::Single(spec.clone()),
        store,
        net: Network::Single {
            backbone: recipe.backbone,
            head: Classifier {
                dropout: recipe.head_dropout,
                linear,
            },
        },
    })
}

/// Build two backbones side by side joined by the `fc1` fusion layer.
///
/// Each backbone's `frozen_prefix` applies within its own layers; the
/// fusion layer always starts trainable.
pub fn build_parallel_ensemble(spec: &ParallelEnsembleSpec, weights: &WeightsSource) -> Result<ModelHandle, ModelError> {
    validate(&spec.backbone_a)?;
    validate(&spec.backbone_b)?;
    if spec.fusion_out != NUM_CLASSES {
        return Err(ModelError::InvalidSpec(format!(
            "fusion_out must be {NUM_CLASSES}, got {}",
            spec.fusion_out
        )));
    }
    let mut store = ParamStore::default();
    let (ra, la) = build_backbone(&mut store, &spec.backbone_a, Some("a"), 10);
    if spec.backbone_a.pretrained {
        load_pretrained(&mut store, &spec.backbone_a, "a.", la.clone(), weights)?;
    }
    let (rb, lb) = build_backbone(&mut store, &spec.backbone_b, Some("b"), 20);
    if spec.backbone_b.pretrained {
        load_pretrained(&mut store, &spec.backbone_b, "b.", lb.clone(), weights)?;
    }
    let heads = match spec.fusion_mode {
        FusionMode::FeatureConcat => None,
        FusionMode::LogitConcat => Some((
            Classifier {
                dropout: ra.head_dropout,
                linear: build_head(
                    &mut store,
                    arch::scheme(spec.backbone_a.architecture),
                    "a.head",
                    ra.backbone.feature_width(),
                    spec.backbone_a.seed,
                    11,
                ),
            },
            Classifier {
                dropout: rb.head_dropout,
                linear: build_head(
                    &mut store,
                    arch::scheme(spec.backbone_b.architecture),
                    "b.head",
                    rb.backbone.feature_width(),
                    spec.backbone_b.seed,
                    21,
                ),
            },
        )),
    };
    let width = match spec.fusion_mode {
        FusionMode::FeatureConcat => ra.backbone.feature_width() + rb.backbone.feature_width(),
        FusionMode::LogitConcat => 2 * NUM_CLASSES,
    };
    let fc1 = build_head(&mut store, InitScheme::TORCH, "fc1", width, spec.seed, 30);
    check_prefix(spec.backbone_a.frozen_prefix, la.len())?;
    check_prefix(spec.backbone_b.frozen_prefix, lb.len())?;
    store.freeze_range(la.start, spec.backbone_a.frozen_prefix);
    store.freeze_range(lb.start, spec.backbone_b.frozen_prefix);
    Ok(ModelHandle {
        spec: NetworkSpec::ParallelEnsemble(spec.clone()),
        store,
        net: Network::Ensemble {
            a: ra.backbone,
            b: rb.backbone,
            heads,
            fc1,
        },
    })
}

pub fn build_network(spec: &NetworkSpec, weights: &WeightsSource) -> Result<ModelHandle, ModelError> {
    match spec {
        NetworkSpec::Single(s) => build_model(s, weights),
        NetworkSpec::ParallelEnsemble(e) => build_parallel_ensemble(e, weights),
    }
}

/// Parameter total of an architecture with a 1000-way classifier, the
/// figure usually quoted for ImageNet models.
pub fn imagenet_parameter_count(arch: Architecture) -> usize {
    let model = build_model(&ModelSpec::new(arch), &WeightsSource::None).expect("random init always builds");
    let head = match &model.net {
        Network::Single { head, .. } => head.linear.in_features,
        Network::Ensemble { .. } => unreachable!("single model"),
    };
    model.parameter_count() + head * (1000 - NUM_CLASSES) + (1000 - NUM_CLASSES)
}

impl ModelHandle {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_parameter_count()
    }

    /// Number of parameter-bearing layers in canonical order.
    pub fn layer_count(&self) -> usize {
        self.store.layer_count()
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let s = self.spec.input_size();
        vec![batch, 3, s, s]
    }

    /// Freeze exactly the first `n` layers of the canonical ordering and
    /// unfreeze the rest.
    pub fn freeze_prefix(&mut self, n: usize) -> Result<(), ModelError> {
        check_prefix(n, self.layer_count())?;
        self.store.set_frozen_prefix(n);
        match &mut self.spec {
            NetworkSpec::Single(s) => s.frozen_prefix = n,
            NetworkSpec::ParallelEnsemble(e) => {
                let la = self
                    .store
                    .layers
                    .iter()
                    .filter(|l| l.name.starts_with("a.") && !l.name.starts_with("a.head"))
                    .count();
                let lb = self
                    .store
                    .layers
                    .iter()
                    .filter(|l| l.name.starts_with("b.") && !l.name.starts_with("b.head"))
                    .count();
                e.backbone_a.frozen_prefix = n.min(la);
                e.backbone_b.frozen_prefix = n.saturating_sub(la).min(lb);
            }
        }
        Ok(())
    }

    /// Width of the fusion layer input, for ensembles.
    pub fn fusion_input_width(&self) -> Option<usize> {
        match &self.net {
            Network::Single { .. } => None,
            Network::Ensemble { fc1, .. } => Some(fc1.in_features),
        }
    }

    /// Parameter ids of the final classification layer (`head` or `fc1`).
    pub fn output_layer_params(&self) -> Vec<usize> {
        let linear = match &self.net {
            Network::Single { head, .. } => head.linear,
            Network::Ensemble { fc1, .. } => *fc1,
        };
        std::iter::once(linear.weight).chain(linear.bias).collect()
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.store.params.len())
            .filter(|&i| self.store.params[i].name.starts_with(prefix))
            .collect()
    }

    /// Record the forward pass, returning `(B, 2)` log-probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let logits = match &self.net {
            Network::Single { backbone, head } => {
                let f = backbone.forward_features(g, x);
                head.forward(g, f)
            }
            Network::Ensemble { a, b, heads, fc1 } => {
                let mut fa = a.forward_features(g, x);
                let mut fb = b.forward_features(g, x);
                if let Some((ha, hb)) = heads {
                    fa = ha.forward(g, fa);
                    fb = hb.forward(g, fb);
                }
                let joined = g.concat(&[fa, fb], 1);
                g.linear(joined, fc1)
            }
        };
        g.log_softmax(logits)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let expected = self.input_shape(shape.first().copied().unwrap_or(0));
        if shape.len() != 4 || shape[1..] != expected[1..] || shape[0] == 0 {
            return Err(ModelError::ShapeMismatch {
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Evaluation-mode log-probabilities of a channel-major `(B, 3, H, W)`
    /// batch.
    pub fn forward_logprobs(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(&batch.shape)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x);
        Ok(g.value(y).clone())
    }

    /// Canonical layer ordering used by [`ModelHandle::freeze_prefix`].
    pub fn describe(&self) -> Vec<LayerDescription> {
        self.store
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerDescription {
                index: i,
                name: l.name.clone(),
                kind: l.kind.as_str(),
                parameters: l.params.iter().map(|&p| self.store.params[p].value.numel()).sum(),
                frozen: self.store.is_layer_frozen(i),
            })
            .collect()
    }

    pub fn describe_text(&self) -> String {
        let mut out = format!(
            "{}: {} layers, {} parameters ({} trainable)\n",
            self.spec.name(),
            self.layer_count(),
            self.parameter_count(),
            self.trainable_parameter_count()
        );
        for d in self.describe() {
            out.push_str(&format!(
                "{:>4} {:<10} {:<12} {:>10} {}\n",
                d.index,
                if d.frozen { "frozen" } else { "trainable" },
                d.kind,
                d.parameters,
                d.name
            ));
        }
        out
    }

    /// Set every parameter of the final classification layer to zero.
    pub fn zero_output_layer(&mut self) {
        for id in self.output_layer_params() {
            self.store.params[id].value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Overwrite parameters and buffers from named tensors; every
    /// parameter must be present with a matching shape.
    pub fn load_named_tensors<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<(), ModelError> {
        for p in &mut self.store.params {
            let t = lookup(&p.name)
                .ok_or_else(|| ModelError::InvalidSpec(format!("missing tensor {}", p.name)))?;
            if t.shape != p.value.shape {
                return Err(ModelError::ShapeMismatch {
                    expected: p.value.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            p.value = t.clone();
        }
        for b in &mut self.store.buffers {
            let t = lookup(&b.name)
                .ok_or_else(|| ModelError::InvalidSpec(format!("missing tensor {}", b.name)))?;
            if t.shape != b.value.shape {
                return Err(ModelError::ShapeMismatch {
                    expected: b.value.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            b.value = t.clone();
        }
        Ok(())
    }

    /// All parameters then all buffers, by name.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.store
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.store.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect()
    }
}
