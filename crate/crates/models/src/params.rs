use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Linear,
    LayerNorm,
    GroupNorm,
    Embedding,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Linear => "linear",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::GroupNorm => "group_norm",
            LayerKind::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub layer: usize,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<usize>,
    pub buffers: Vec<usize>,
}

/// All parameters of a model, grouped into parameterized layers in
/// registration (canonical) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub buffers: Vec<Buffer>,
    pub layers: Vec<LayerInfo>,
    /// Per-layer freeze flags; missing entries are trainable.
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Number of leading frozen layers.
    pub fn frozen_prefix(&self) -> usize {
        self.frozen.iter().take_while(|&&f| f).count()
    }

    pub fn frozen_layer_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    /// Freeze exactly the first `n` layers.
    pub fn set_frozen_prefix(&mut self, n: usize) {
        assert!(n <= self.layers.len());
        self.frozen = (0..self.layers.len()).map(|i| i < n).collect();
    }

    /// Freeze layers `start..start + n` in addition to any already frozen.
    pub fn freeze_range(&mut self, start: usize, n: usize) {
        assert!(start + n <= self.layers.len());
        self.frozen.resize(self.layers.len(), false);
        self.frozen[start..start + n].iter_mut().for_each(|f| *f = true);
    }

    pub fn is_layer_frozen(&self, layer: usize) -> bool {
        self.frozen.get(layer).copied().unwrap_or(false)
    }

    pub fn is_trainable(&self, param: usize) -> bool {
        !self.is_layer_frozen(self.params[param].layer)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !self.is_layer_frozen(p.layer))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn buffer_index(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.name == name)
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(usize, Tensor)>) {
        for (i, t) in updates {
            self.buffers[i].value = t;
        }
    }

    fn begin_layer(&mut self, name: String, kind: LayerKind) -> usize {
        self.layers.push(LayerInfo {
            name,
            kind,
            params: Vec::new(),
            buffers: Vec::new(),
        });
        self.layers.len() - 1
    }

    fn add_param(&mut self, layer: usize, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value, layer });
        let id = self.params.len() - 1;
        self.layers[layer].params.push(id);
        id
    }

    fn add_buffer(&mut self, layer: usize, name: String, value: Tensor) -> usize {
        self.buffers.push(Buffer { name, value });
        let id = self.buffers.len() - 1;
        self.layers[layer].buffers.push(id);
        id
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal with the given std, redrawn outside `[-2, 2]`.
    TruncNormal(f64),
    Uniform(f64),
    /// `N(0, 2 / fan_out)`.
    KaimingNormalFanOut,
    /// `N(0, 2 / fan_in)`.
    KaimingNormalFanIn,
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform,
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanInUniform,
}

impl Init {
    pub fn sample(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        let uniform = |bound: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
            if bound == 0.0 {
                return vec![0.0; n];
            }
            let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => normal(std, rng),
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(rng);
                        if (-2.0..=2.0).contains(&v) {
                            break v as f32;
                        }
                    })
                    .collect()
            }
            Init::Uniform(bound) => uniform(bound, rng),
            Init::KaimingNormalFanOut => normal((2.0 / fan_out.max(1) as f64).sqrt(), rng),
            Init::KaimingNormalFanIn => normal((2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::KaimingUniform => uniform((6.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::FanInUniform => uniform(1.0 / (fan_in.max(1) as f64).sqrt(), rng),
        };
        Tensor::new(shape.to_vec(), data)
    }
}

/// Conv weight and bias initialization of one architecture family.
#[derive(Debug, Clone, Copy)]
pub struct InitScheme {
    pub conv: Init,
    pub conv_bias: Init,
    pub linear: Init,
    pub linear_bias: Init,
}

impl InitScheme {
    /// PyTorch layer defaults.
    pub const TORCH: InitScheme = InitScheme {
        conv: Init::FanInUniform,
        conv_bias: Init::FanInUniform,
        linear: Init::FanInUniform,
        linear_bias: Init::FanInUniform,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: (usize, usize),
    pub stride: (usize, usize),
    /// top, left, bottom, right
    pub pad: [usize; 4],
    pub groups: usize,
    pub bias: bool,
    /// Standardize the weight per output channel before use.
    pub weight_std: Option<f32>,
    /// Pad to keep `ceil(size / stride)` outputs, split low side first.
    pub same: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> ConvSpec {
        ConvSpec {
            cin,
            cout,
            k: (k, k),
            stride: (1, 1),
            pad: [0; 4],
            groups: 1,
            bias: false,
            weight_std: None,
            same: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = [p; 4];
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn depthwise(self) -> Self {
        let c = self.cin;
        self.groups(c)
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn same(mut self) -> Self {
        self.same = true;
        self
    }

    pub fn weight_std(mut self, eps: f32) -> Self {
        self.weight_std = Some(eps);
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub layer: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub eps: f32,
    pub momentum: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
    pub eps: f32,
}

/// Registers layers into a store in canonical order.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub scheme: InitScheme,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, scheme: InitScheme) -> Self {
        Builder {
            store,
            rng,
            scheme,
            prefix: String::new(),
        }
    }

    pub fn with_prefix<R>(&mut self, prefix: &str, f: impl FnOnce(&mut Builder) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{prefix}.");
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn name(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Conv {
        assert!(spec.cin % spec.groups == 0 && spec.cout % spec.groups == 0);
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::Conv);
        let cin_g = spec.cin / spec.groups;
        let shape = [spec.cout, cin_g, spec.k.0, spec.k.1];
        let fan_in = cin_g * spec.k.0 * spec.k.1;
        let fan_out = spec.cout / spec.groups * spec.k.0 * spec.k.1;
        let w = self.scheme.conv.sample(&shape, fan_in, fan_out, self.rng);
        let weight = self.store.add_param(layer, format!("{full}.weight"), w);
        let bias = spec.bias.then(|| {
            let b = self.scheme.conv_bias.sample(&[spec.cout], fan_in, fan_out, self.rng);
            self.store.add_param(layer, format!("{full}.bias"), b)
        });
        Conv { spec, weight, bias }
    }

    pub fn bn(&mut self, name: &str, channels: usize, eps: f32) -> BatchNorm {
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::BatchNorm);
        let gamma = self
            .store
            .add_param(layer, format!("{full}.weight"), Tensor::filled(&[channels], 1.0));
        let beta = self
            .store
            .add_param(layer, format!("{full}.bias"), Tensor::zeros(&[channels]));
        let running_mean = self
            .store
            .add_buffer(layer, format!("{full}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = self
            .store
            .add_buffer(layer, format!("{full}.running_var"), Tensor::filled(&[channels], 1.0));
        BatchNorm {
            layer,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            momentum: 0.1,
        }
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Linear {
        self.linear_with(name, in_features, out_features, true)
    }

    pub fn linear_with(&mut self, name: &str, in_features: usize, out_features: usize, bias: bool) -> Linear {
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::Linear);
        let w = self
            .scheme
            .linear
            .sample(&[out_features, in_features], in_features, out_features, self.rng);
        let weight = self.store.add_param(layer, format!("{full}.weight"), w);
        let bias = bias.then(|| {
            let b = self
                .scheme
                .linear_bias
                .sample(&[out_features], in_features, out_features, self.rng);
            self.store.add_param(layer, format!("{full}.bias"), b)
        });
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize, eps: f32) -> LayerNorm {
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::LayerNorm);
        let gamma = self
            .store
            .add_param(layer, format!("{full}.weight"), Tensor::filled(&[dim], 1.0));
        let beta = self.store.add_param(layer, format!("{full}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, eps }
    }

    pub fn group_norm(&mut self, name: &str, groups: usize, channels: usize, eps: f32) -> GroupNorm {
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::GroupNorm);
        let gamma = self
            .store
            .add_param(layer, format!("{full}.weight"), Tensor::filled(&[channels], 1.0));
        let beta = self
            .store
            .add_param(layer, format!("{full}.bias"), Tensor::zeros(&[channels]));
        GroupNorm {
            groups,
            gamma,
            beta,
            eps,
        }
    }

    /// A standalone learned tensor (class token, position embedding).
    pub fn embedding(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let full = self.name(name);
        let layer = self.store.begin_layer(full.clone(), LayerKind::Embedding);
        let value = init.sample(shape, shape.iter().product(), shape.iter().product(), self.rng);
        self.store.add_param(layer, full, value)
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }
}
