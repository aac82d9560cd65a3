//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, so any number of
//! evaluation graphs may run at once. Batch-norm running statistics computed
//! in training mode are collected and applied by the caller afterwards.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{self, ConvGeom, PoolGeom, ResampleMap};
use crate::params::{BatchNorm, Conv, GroupNorm, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, seeded by the given value.
    Train(u64),
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Silu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Value<'s> {
    Own(Tensor),
    Ref(&'s Tensor),
}

enum Op {
    Leaf,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f32),
    Act(Var, Activation),
    NormRows {
        x: Var,
        cols: usize,
        xhat: Vec<f32>,
        invstd: Vec<f32>,
    },
    BnNorm {
        x: Var,
        invstd: Vec<f32>,
        /// Present in training mode.
        xhat: Option<Vec<f32>>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    LastAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
        s: usize,
    },
    GlobalAvg(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand {
        x: Var,
    },
    Resample {
        x: Var,
        map: Arc<ResampleMap>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Nll {
        x: Var,
        labels: Vec<usize>,
        scale: f64,
    },
}

struct Node<'s> {
    value: Value<'s>,
    op: Op,
    grad: bool,
}

/// Parameter gradients indexed like `ParamStore::params`.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub params: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, param: usize) -> Option<&[f32]> {
        self.params.get(param).and_then(|g| g.as_deref())
    }

    pub fn norm(&self, params: impl IntoIterator<Item = usize>) -> f64 {
        params
            .into_iter()
            .filter_map(|p| self.get(p))
            .flat_map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)))
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    param_vars: HashMap<usize, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(usize, Tensor)>,
    nll_values: HashMap<usize, f64>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn activate(a: Activation, x: f32) -> f32 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Relu6 => x.clamp(0.0, 6.0),
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Gelu => 0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2)),
    }
}

fn activate_grad(a: Activation, x: f32) -> f32 {
    match a {
        Activation::Relu => f32::from(x > 0.0),
        Activation::Relu6 => f32::from(x > 0.0 && x < 6.0),
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        Activation::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f32::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

/// Normalize each row of a `rows x cols` matrix to zero mean and unit
/// (biased) variance.
fn normalize_rows(x: &[f32], cols: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut invstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + f64::from(eps)).sqrt();
        invstd[r] = is as f32;
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = ((f64::from(v) - mean) * is) as f32;
        }
    }
    (xhat, invstd)
}

fn normalize_backward<'a>(dy: &'a [f32], xhat: &'a [f32], invstd: f32) -> impl Iterator<Item = f32> + 'a {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mean_dy_xhat = dy
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum::<f64>()
        / n;
    dy.iter()
        .zip(xhat)
        .map(move |(&g, &xh)| ((f64::from(g) - mean_dy - f64::from(xh) * mean_dy_xhat) * f64::from(invstd)) as f32)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Graph<'s> {
        let seed = match mode {
            Mode::Train(seed) => seed,
            Mode::Eval => 0,
        };
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            nll_values: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node {
            value: Value::Own(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Own(t) => t,
            Value::Ref(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Own(t),
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Ref(&self.store.params[id].value),
            op: Op::Param(id),
            grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Batch-norm running-statistic updates gathered in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(usize, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Raw convolution with explicit weight and optional bias variables.
    pub fn conv2d_raw(&mut self, x: Var, w: Var, b: Option<Var>, conv: &Conv) -> Var {
        let s = conv.spec;
        let geom = ConvGeom::new(self.shape(x), s.cout, s.k, s.stride, s.pad, s.groups, s.same);
        assert_eq!(self.shape(x)[1], s.cin, "conv input channels");
        let out = kernels::conv_forward(
            &self.value(x).data,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(geom.out_shape(), out), Op::Conv { x, w, b, geom }, &inputs)
    }

    pub fn conv(&mut self, x: Var, conv: &Conv) -> Var {
        let mut w = self.param(conv.weight);
        if let Some(eps) = conv.spec.weight_std {
            let cols = self.value(w).numel() / conv.spec.cout;
            w = self.normalize_rows(w, cols, eps);
        }
        let b = conv.bias.map(|b| self.param(b));
        self.conv2d_raw(x, w, b, conv)
    }

    pub fn linear(&mut self, x: Var, lin: &Linear) -> Var {
        let w = self.param(lin.weight);
        let b = lin.bias.map(|b| self.param(b));
        let xs = self.shape(x).to_vec();
        let k = *xs.last().expect("rank >= 1");
        assert_eq!(k, lin.in_features, "linear input width");
        let rows = self.value(x).numel() / k;
        let n = lin.out_features;
        let mut out = vec![0.0; rows * n];
        gemm_rows(&self.value(x).data, &self.value(w).data, rows, k, n, &mut out);
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = n;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Batched product of `(B, M, K)` with `(B, K, N)`, or with `(B, N, K)`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(sb[0], batch);
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm_block(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bd[i * k * n..(i + 1) * k * n],
                bstr,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Add(a, b), &[a, b])
    }

    /// `a + b` with `b` repeated over the leading elements of `a`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let bn = self.value(b).numel();
        assert_eq!(self.value(a).numel() % bn, 0, "tiled add shapes");
        let bd = &self.value(b).data;
        let out: Vec<f32> = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % bn])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::AddTiled(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).data.iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Scale(x, s), &[x])
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        let out = self.value(x).data.iter().map(|&v| activate(a, v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Act(x, a), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn normalize_rows(&mut self, x: Var, cols: usize, eps: f32) -> Var {
        let (xhat, invstd) = normalize_rows(&self.value(x).data, cols, eps);
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, xhat.clone()),
            Op::NormRows { x, cols, xhat, invstd },
            &[x],
        )
    }

    fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = self.value(x).data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = *v * g[ch] + b[ch];
        }
        self.push(Tensor::new(shape, out), Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    fn last_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = self.value(x).data.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v * g[i % d] + b[i % d];
        }
        self.push(Tensor::new(shape, out), Op::LastAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Batch normalization over `(N, C, ...)`. Frozen layers and evaluation
    /// graphs use the running statistics.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let train = matches!(self.mode, Mode::Train(_)) && !self.store.is_layer_frozen(bn.layer);
        let data = &self.value(x).data;
        let mut out = vec![0.0; data.len()];
        let mut invstd = vec![0.0; c];
        if train {
            let count = (n * inner) as f64;
            let mut means = vec![0.0f64; c];
            let mut vars = vec![0.0f64; c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    sum += data[(s * c + ch) * inner..(s * c + ch + 1) * inner]
                        .iter()
                        .map(|&v| f64::from(v))
                        .sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for s in 0..n {
                    sq += data[(s * c + ch) * inner..(s * c + ch + 1) * inner]
                        .iter()
                        .map(|&v| (f64::from(v) - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count;
                let is = 1.0 / (var + f64::from(bn.eps)).sqrt();
                invstd[ch] = is as f32;
                means[ch] = mean;
                vars[ch] = var;
                for s in 0..n {
                    let range = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                    for i in range {
                        out[i] = ((f64::from(data[i]) - mean) * is) as f32;
                    }
                }
            }
            let m = f64::from(bn.momentum);
            let rm = &self.store.buffers[bn.running_mean].value;
            let rv = &self.store.buffers[bn.running_var].value;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let new_mean = (0..c).map(|i| ((1.0 - m) * f64::from(rm.data[i]) + m * means[i]) as f32).collect();
            let new_var = (0..c)
                .map(|i| ((1.0 - m) * f64::from(rv.data[i]) + m * vars[i] * unbias) as f32)
                .collect();
            self.buffer_updates.push((bn.running_mean, Tensor::new(vec![c], new_mean)));
            self.buffer_updates.push((bn.running_var, Tensor::new(vec![c], new_var)));
        } else {
            let rm = &self.store.buffers[bn.running_mean].value.data;
            let rv = &self.store.buffers[bn.running_var].value.data;
            for ch in 0..c {
                invstd[ch] = 1.0 / (rv[ch] + bn.eps).sqrt();
            }
            for (i, o) in out.iter_mut().enumerate() {
                let ch = (i / inner) % c;
                *o = (data[i] - rm[ch]) * invstd[ch];
            }
        }
        let xhat = train.then(|| out.clone());
        let normed = self.push(Tensor::new(shape, out), Op::BnNorm { x, invstd, xhat }, &[x]);
        let (g, b) = (self.param(bn.gamma), self.param(bn.beta));
        self.channel_affine(normed, g, b)
    }

    pub fn layer_norm(&mut self, x: Var, ln: &LayerNorm) -> Var {
        let d = *self.shape(x).last().expect("rank >= 1");
        let normed = self.normalize_rows(x, d, ln.eps);
        let (g, b) = (self.param(ln.gamma), self.param(ln.beta));
        self.last_affine(normed, g, b)
    }

    pub fn group_norm(&mut self, x: Var, gn: &GroupNorm) -> Var {
        let shape = self.shape(x).to_vec();
        let per_group = self.value(x).numel() / (shape[0] * gn.groups);
        let normed = self.normalize_rows(x, per_group, gn.eps);
        let (g, b) = (self.param(gn.gamma), self.param(gn.beta));
        self.channel_affine(normed, g, b)
    }

    pub fn max_pool(&mut self, x: Var, p: PoolGeom) -> Var {
        let shape = self.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = p.out_hw(h, w);
        let (out, argmax) = kernels::max_pool(&self.value(x).data, shape[0] * shape[1], h, w, &p);
        self.push(
            Tensor::new(vec![shape[0], shape[1], oh, ow], out),
            Op::MaxPool { x, argmax },
            &[x],
        )
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, s: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let out = kernels::avg_pool(&self.value(x).data, shape[0] * shape[1], h, w, k, s);
        let oshape = vec![shape[0], shape[1], (h - k) / s + 1, (w - k) / s + 1];
        self.push(Tensor::new(oshape, out), Op::AvgPool { x, k, s }, &[x])
    }

    /// `(N, C, H, W)` to `(N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let hw: usize = shape[2..].iter().product();
        let out = self
            .value(x)
            .data
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32)
            .collect();
        self.push(Tensor::new(vec![shape[0], shape[1]], out), Op::GlobalAvg(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let first = self.shape(inputs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let data = self.value(x).data.clone();
        self.push(Tensor::new(shape.to_vec(), data), Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let (out, shape) = permute_data(&self.value(x).data, self.shape(x), perm);
        self.push(
            Tensor::new(shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let data = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(Tensor::new(oshape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// Repeat a `(1, ...)` tensor `n` times along the first axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape[0], 1);
        let data = self.value(x).data.repeat(n);
        let mut oshape = shape;
        oshape[0] = n;
        self.push(Tensor::new(oshape, data), Op::Expand { x }, &[x])
    }

    pub fn resize_bilinear(&mut self, x: Var, out_hw: (usize, usize)) -> Var {
        let shape = self.shape(x).to_vec();
        let map = Arc::new(ResampleMap::bilinear((shape[2], shape[3]), out_hw));
        let out = map.apply(&self.value(x).data, shape[0] * shape[1]);
        self.push(
            Tensor::new(vec![shape[0], shape[1], out_hw.0, out_hw.1], out),
            Op::Resample { x, map },
            &[x],
        )
    }

    fn last_dim_map(&self, x: Var, log: bool) -> Tensor {
        let t = self.value(x);
        let d = *t.shape.last().expect("rank >= 1");
        let mut out = vec![0.0; t.numel()];
        for (row, o) in t.data.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
            if log {
                let lse = sum.ln() as f32;
                for (o, &v) in o.iter_mut().zip(row) {
                    *o = v - max - lse;
                }
            } else {
                for (o, &v) in o.iter_mut().zip(row) {
                    *o = (f64::from(v - max).exp() / sum) as f32;
                }
            }
        }
        Tensor::new(t.shape.clone(), out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.last_dim_map(x, false);
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = self.last_dim_map(x, true);
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Inverted dropout, active only in training graphs.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if p <= 0.0 || self.mode == Mode::Eval {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::Dropout { x, mask }, &[x])
    }

    /// Negative log-likelihood of `labels` under `(B, C)` log-probabilities.
    pub fn nll(&mut self, x: Var, labels: &[usize], reduction: Reduction) -> Var {
        let t = self.value(x);
        let (b, c) = (t.shape[0], t.shape[1]);
        assert_eq!(labels.len(), b, "one label per row");
        let sum: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                assert!(y < c, "label out of range");
                -f64::from(t.data[i * c + y])
            })
            .sum();
        let scale = match reduction {
            Reduction::Mean => 1.0 / b as f64,
            Reduction::Sum => 1.0,
        };
        let loss = sum * scale;
        let v = self.push(
            Tensor::scalar(loss as f32),
            Op::Nll {
                x,
                labels: labels.to_vec(),
                scale,
            },
            &[x],
        );
        self.nll_values.insert(v.0, loss);
        v
    }

    /// Full-precision value of an NLL node.
    pub fn loss_f64(&self, v: Var) -> f64 {
        self.nll_values
            .get(&v.0)
            .copied()
            .unwrap_or_else(|| f64::from(self.value(v).data[0]))
    }

    /// Back-propagate from a scalar and return gradients of every trainable
    /// parameter that contributed.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads {
            params: vec![None; self.store.params.len()],
        };
        if !self.nodes[loss.0].grad {
            return out;
        }
        grads[loss.0] = Some(vec![1.0; self.value(loss).numel()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn backward_node(&self, i: usize, g: Vec<f32>, grads: &mut [Option<Vec<f32>>], out: &mut Grads) {
        let acc = |grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(pid) => match &mut out.params[*pid] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            },
            Op::Conv { x, w, b, geom } => {
                if self.needs(*x) {
                    acc(grads, *x, kernels::conv_backward_input(&g, &self.value(*w).data, geom));
                }
                if self.needs(*w) {
                    let wl = self.value(*w).numel();
                    acc(grads, *w, kernels::conv_backward_weight(&self.value(*x).data, &g, wl, geom));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(grads, *b, kernels::conv_backward_bias(&g, geom));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let wt = self.value(*w);
                let (n, k) = (wt.shape[0], wt.shape[1]);
                let rows = g.len() / n;
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm_block(rows, n, k, &g, (n, 1), &wt.data, (k, 1), &mut dx, (k, 1));
                    acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm_block(n, rows, k, &g, (1, n), &self.value(*x).data, (k, 1), &mut dw, (k, 1));
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0f32; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        acc(grads, *b, db);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    // dA = dC B^T
                    let mut da = vec![0.0; batch * m * k];
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    for t in 0..batch {
                        gemm_block(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &bd[t * k * n..(t + 1) * k * n],
                            bstr,
                            &mut da[t * m * k..(t + 1) * m * k],
                            (k, 1),
                        );
                    }
                    acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB (N, K) = dC^T A
                            gemm_block(n, m, k, gt, (1, n), at, (k, 1), dbt, (k, 1));
                        } else {
                            // dB (K, N) = A^T dC
                            gemm_block(k, m, n, at, (1, k), gt, (n, 1), dbt, (n, 1));
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::AddTiled(a, b) => {
                if self.needs(*b) {
                    let bn = self.value(*b).numel();
                    let mut db = vec![0.0f32; bn];
                    for chunk in g.chunks(bn) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                    acc(grads, *b, db);
                }
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Scale(x, s) => acc(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::Act(x, a) => {
                let xd = &self.value(*x).data;
                acc(grads, *x, g.iter().zip(xd).map(|(d, &v)| d * activate_grad(*a, v)).collect());
            }
            Op::NormRows { x, cols, xhat, invstd } => {
                let mut dx = Vec::with_capacity(g.len());
                for (r, (dy, xh)) in g.chunks(*cols).zip(xhat.chunks(*cols)).enumerate() {
                    dx.extend(normalize_backward(dy, xh, invstd[r]));
                }
                acc(grads, *x, dx);
            }
            Op::BnNorm { x, invstd, xhat } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![0.0; g.len()];
                match xhat {
                    None => {
                        for (idx, d) in dx.iter_mut().enumerate() {
                            *d = g[idx] * invstd[(idx / inner) % c];
                        }
                    }
                    Some(xhat) => {
                        for ch in 0..c {
                            let idx: Vec<usize> = (0..n)
                                .flat_map(|s| (s * c + ch) * inner..(s * c + ch + 1) * inner)
                                .collect();
                            let dy: Vec<f32> = idx.iter().map(|&j| g[j]).collect();
                            let xh: Vec<f32> = idx.iter().map(|&j| xhat[j]).collect();
                            for (j, v) in idx.iter().zip(normalize_backward(&dy, &xh, invstd[ch])) {
                                dx[*j] = v;
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let gm = &self.value(*gamma).data;
                if self.needs(*gamma) || self.needs(*beta) {
                    let xd = &self.value(*x).data;
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for (idx, &d) in g.iter().enumerate() {
                        let ch = (idx / inner) % c;
                        dg[ch] += f64::from(d) * f64::from(xd[idx]);
                        db[ch] += f64::from(d);
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, dg.iter().map(|&v| v as f32).collect());
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, db.iter().map(|&v| v as f32).collect());
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, g.iter().enumerate().map(|(idx, d)| d * gm[(idx / inner) % c]).collect());
                }
            }
            Op::LastAffine { x, gamma, beta } => {
                let d = *self.shape(*x).last().expect("rank >= 1");
                let gm = &self.value(*gamma).data;
                if self.needs(*gamma) || self.needs(*beta) {
                    let xd = &self.value(*x).data;
                    let mut dg = vec![0.0f64; d];
                    let mut db = vec![0.0f64; d];
                    for (idx, &v) in g.iter().enumerate() {
                        dg[idx % d] += f64::from(v) * f64::from(xd[idx]);
                        db[idx % d] += f64::from(v);
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, dg.iter().map(|&v| v as f32).collect());
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, db.iter().map(|&v| v as f32).collect());
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, g.iter().enumerate().map(|(idx, v)| v * gm[idx % d]).collect());
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (d, &a) in g.iter().zip(argmax) {
                    dx[a as usize] += d;
                }
                acc(grads, *x, dx);
            }
            Op::AvgPool { x, k, s } => {
                let shape = self.shape(*x);
                acc(
                    grads,
                    *x,
                    kernels::avg_pool_backward(&g, shape[0] * shape[1], shape[2], shape[3], *k, *s),
                );
            }
            Op::GlobalAvg(x) => {
                let shape = self.shape(*x);
                let hw: usize = shape[2..].iter().product();
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &d in &g {
                    dx.extend(std::iter::repeat_n(d / hw as f32, hw));
                }
                acc(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(inputs[0]);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total: usize = inputs.iter().map(|v| self.shape(*v)[*axis]).sum();
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            d.extend_from_slice(&g[base..base + len]);
                        }
                        acc(grads, *v, d);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(grads, *x, g),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let out_shape = self.shape(Var(i));
                let (dx, _) = permute_data(&g, out_shape, &inverse);
                acc(grads, *x, dx);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[*axis];
                let len = g.len() / (outer * inner);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * d + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, dx);
            }
            Op::Expand { x } => {
                let n = self.value(*x).numel();
                let mut dx = vec![0.0f32; n];
                for chunk in g.chunks(n) {
                    dx.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                acc(grads, *x, dx);
            }
            Op::Resample { x, map } => {
                let shape = self.shape(*x);
                acc(grads, *x, map.backward(&g, shape[0] * shape[1]));
            }
            Op::Softmax(x) => {
                let y = &self.value(Var(i)).data;
                let d = *self.shape(*x).last().expect("rank >= 1");
                let mut dx = vec![0.0; g.len()];
                for ((dy, yr), o) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f32 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &a), &b) in o.iter_mut().zip(dy).zip(yr) {
                        *o = b * (a - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.value(Var(i)).data;
                let d = *self.shape(*x).last().expect("rank >= 1");
                let mut dx = vec![0.0; g.len()];
                for ((dy, yr), o) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)) {
                    let sum: f32 = dy.iter().sum();
                    for ((o, &a), &b) in o.iter_mut().zip(dy).zip(yr) {
                        *o = a - b.exp() * sum;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Dropout { x, mask } => acc(grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::Nll { x, labels, scale } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] = (-f64::from(g[0]) * scale) as f32;
                }
                acc(grads, *x, dx);
            }
        }
    }
}

/// `out (rows, n) = x (rows, k) * w^T` with `w` stored `(n, k)`.
fn gemm_rows(x: &[f32], w: &[f32], rows: usize, k: usize, n: usize, out: &mut [f32]) {
    gemm_block(rows, k, n, x, (k, 1), w, (1, k), out, (n, 1));
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
    sc: (usize, usize),
) {
    kernels::gemm(m, k, n, a, sa, b, sb, c, sc, 0.0);
}
