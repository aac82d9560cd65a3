//! The five optimizers of the ablation grid, with PyTorch update rules.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Grads;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Radam,
    Ranger,
    Rprop,
    SgdWarmRestarts,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Adamw,
        OptimizerKind::Radam,
        OptimizerKind::Ranger,
        OptimizerKind::Rprop,
        OptimizerKind::SgdWarmRestarts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Radam => "radam",
            OptimizerKind::Ranger => "ranger",
            OptimizerKind::Rprop => "rprop",
            OptimizerKind::SgdWarmRestarts => "sgd_warm_restarts",
        }
    }

    /// Default hyperparameters, keyed as in configuration files.
    pub fn defaults(self) -> BTreeMap<String, f64> {
        let adam = [("beta1", 0.9), ("beta2", 0.999), ("eps", 1e-8)];
        let pairs: Vec<(&str, f64)> = match self {
            OptimizerKind::Adamw => [("weight_decay", 0.01)].into_iter().chain(adam).collect(),
            OptimizerKind::Radam => [("weight_decay", 0.0)].into_iter().chain(adam).collect(),
            OptimizerKind::Ranger => [("weight_decay", 0.0), ("lookahead_k", 6.0), ("lookahead_alpha", 0.5)]
                .into_iter()
                .chain(adam)
                .collect(),
            OptimizerKind::Rprop => vec![
                ("eta_minus", 0.5),
                ("eta_plus", 1.2),
                ("step_min", 1e-6),
                ("step_max", 50.0),
            ],
            OptimizerKind::SgdWarmRestarts => vec![
                ("momentum", 0.9),
                ("weight_decay", 0.0),
                ("restart_period", 10.0),
                ("period_multiplier", 2.0),
                ("eta_min", 0.0),
            ],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, OptimError> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| OptimError::UnknownOptimizer(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("unknown optimizer `{0}` (expected adamw, radam, ranger, rprop or sgd_warm_restarts)")]
    UnknownOptimizer(String),
    #[error("{kind} requires hyperparameter `{name}`")]
    MissingHyperparam { kind: OptimizerKind, name: String },
    #[error("{kind} does not take hyperparameter `{name}`")]
    UnknownHyperparam { kind: OptimizerKind, name: String },
    #[error("invalid value {value} for {name}")]
    InvalidHyperparam { name: String, value: f64 },
    #[error("optimizer state does not match the parameters")]
    StateMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
}

impl OptimizerSpec {
    /// Spec with every default hyperparameter filled in.
    pub fn new(kind: OptimizerKind) -> OptimizerSpec {
        OptimizerSpec {
            kind,
            hyperparams: kind.defaults(),
        }
    }

    /// Fill absent hyperparameters from the defaults.
    pub fn with_defaults(mut self) -> OptimizerSpec {
        for (k, v) in self.kind.defaults() {
            self.hyperparams.entry(k).or_insert(v);
        }
        self
    }

    pub fn set(mut self, name: &str, value: f64) -> OptimizerSpec {
        self.hyperparams.insert(name.to_string(), value);
        self
    }

    /// Stable identifier such as `adamw(beta1=0.9,...)`.
    pub fn identifier(&self) -> String {
        let params: Vec<String> = self.hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.kind, params.join(","))
    }

    fn get(&self, name: &str) -> Result<f64, OptimError> {
        let v = *self.hyperparams.get(name).ok_or_else(|| OptimError::MissingHyperparam {
            kind: self.kind,
            name: name.to_string(),
        })?;
        if !v.is_finite() {
            return Err(OptimError::InvalidHyperparam {
                name: name.to_string(),
                value: v,
            });
        }
        Ok(v)
    }
}

/// Cosine annealing with warm restarts: learning rate at epoch `t` for an
/// initial period `t0` that grows by `mult` after every restart.
pub fn warm_restart_lr(base: f64, eta_min: f64, t0: usize, mult: usize, epoch: usize) -> f64 {
    let (mut start, mut period) = (0usize, t0.max(1));
    while epoch >= start + period {
        start += period;
        period *= mult.max(1);
    }
    let t_cur = (epoch - start) as f64;
    eta_min + (base - eta_min) * (1.0 + (PI * t_cur / period as f64).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Rule {
    AdamW { beta1: f64, beta2: f64, eps: f64, wd: f64 },
    RAdam { beta1: f64, beta2: f64, eps: f64, wd: f64 },
    Rprop { eta_minus: f64, eta_plus: f64, step_min: f64, step_max: f64 },
    Sgd { momentum: f64, wd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Lookahead {
    k: usize,
    alpha: f64,
    slow: Vec<Option<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct Slot {
    step: u64,
    /// Adam first moment, SGD momentum buffer, or Rprop previous gradient.
    a: Vec<f32>,
    /// Adam second moment or Rprop step sizes.
    b: Vec<f32>,
}

/// Serializable optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub base_lr: f64,
    pub lr: f64,
    pub steps: u64,
    slots: Vec<Option<Slot>>,
    lookahead: Option<Lookahead>,
}

pub struct Optimizer {
    spec: OptimizerSpec,
    rule: Rule,
    schedule: Option<(usize, usize, f64)>,
    base_lr: f64,
    lr: f64,
    steps: u64,
    slots: Vec<Option<Slot>>,
    lookahead: Option<Lookahead>,
}

/// Validate `spec` and create an optimizer for a store of `params`
/// parameters. Missing hyperparameters are errors; use
/// [`OptimizerSpec::new`] or [`OptimizerSpec::with_defaults`] for defaults.
pub fn build_optimizer(spec: &OptimizerSpec, lr: f64, params: usize) -> Result<Optimizer, OptimError> {
    let kind = spec.kind;
    if let Some(name) = spec.hyperparams.keys().find(|k| !kind.defaults().contains_key(*k)) {
        return Err(OptimError::UnknownHyperparam {
            kind,
            name: name.clone(),
        });
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(OptimError::InvalidHyperparam {
            name: "learning_rate".into(),
            value: lr,
        });
    }
    let adam = |s: &OptimizerSpec| -> Result<(f64, f64, f64, f64), OptimError> {
        Ok((s.get("beta1")?, s.get("beta2")?, s.get("eps")?, s.get("weight_decay")?))
    };
    let mut schedule = None;
    let mut lookahead = None;
    let rule = match kind {
        OptimizerKind::Adamw => {
            let (beta1, beta2, eps, wd) = adam(spec)?;
            Rule::AdamW { beta1, beta2, eps, wd }
        }
        OptimizerKind::Radam | OptimizerKind::Ranger => {
            let (beta1, beta2, eps, wd) = adam(spec)?;
            if kind == OptimizerKind::Ranger {
                let k = spec.get("lookahead_k")?;
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(OptimError::InvalidHyperparam {
                        name: "lookahead_k".into(),
                        value: k,
                    });
                }
                lookahead = Some(Lookahead {
                    k: k as usize,
                    alpha: spec.get("lookahead_alpha")?,
                    slow: vec![None; params],
                });
            }
            Rule::RAdam { beta1, beta2, eps, wd }
        }
        OptimizerKind::Rprop => Rule::Rprop {
            eta_minus: spec.get("eta_minus")?,
            eta_plus: spec.get("eta_plus")?,
            step_min: spec.get("step_min")?,
            step_max: spec.get("step_max")?,
        },
        OptimizerKind::SgdWarmRestarts => {
            let t0 = spec.get("restart_period")?;
            let mult = spec.get("period_multiplier")?;
            for (name, v) in [("restart_period", t0), ("period_multiplier", mult)] {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(OptimError::InvalidHyperparam { name: name.into(), value: v });
                }
            }
            schedule = Some((t0 as usize, mult as usize, spec.get("eta_min")?));
            Rule::Sgd {
                momentum: spec.get("momentum")?,
                wd: spec.get("weight_decay")?,
            }
        }
    };
    Ok(Optimizer {
        spec: spec.clone(),
        rule,
        schedule,
        base_lr: lr,
        lr,
        steps: 0,
        slots: vec![None; params],
        lookahead,
    })
}

impl Optimizer {
    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply the per-epoch learning-rate schedule, if any.
    pub fn begin_epoch(&mut self, epoch: usize) {
        if let Some((t0, mult, eta_min)) = self.schedule {
            self.lr = warm_restart_lr(self.base_lr, eta_min, t0, mult, epoch);
        }
    }

    /// Update every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.steps += 1;
        let lr = self.lr;
        if let Some(la) = &mut self.lookahead {
            for id in 0..store.params.len() {
                if store.is_trainable(id) && grads.get(id).is_some() && la.slow[id].is_none() {
                    la.slow[id] = Some(store.params[id].value.data.clone());
                }
            }
        }
        for id in 0..store.params.len() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = &mut store.params[id].value.data;
            let slot = self.slots[id].get_or_insert_with(Slot::default);
            slot.step += 1;
            let t = slot.step as i32;
            match self.rule {
                Rule::AdamW { beta1, beta2, eps, wd } => {
                    init(&mut slot.a, p.len());
                    init(&mut slot.b, p.len());
                    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for i in 0..p.len() {
                        let gi = f64::from(g[i]);
                        let mut pi = f64::from(p[i]) * (1.0 - lr * wd);
                        let m = beta1 * f64::from(slot.a[i]) + (1.0 - beta1) * gi;
                        let v = beta2 * f64::from(slot.b[i]) + (1.0 - beta2) * gi * gi;
                        pi -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                        slot.a[i] = m as f32;
                        slot.b[i] = v as f32;
                        p[i] = pi as f32;
                    }
                }
                Rule::RAdam { beta1, beta2, eps, wd } => {
                    init(&mut slot.a, p.len());
                    init(&mut slot.b, p.len());
                    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                    let rho_t = rho_inf - 2.0 * f64::from(t) * beta2.powi(t) / bc2;
                    let rect = (rho_t > 5.0).then(|| {
                        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
                    });
                    for i in 0..p.len() {
                        let pi = f64::from(p[i]);
                        let gi = f64::from(g[i]) + wd * pi;
                        let m = beta1 * f64::from(slot.a[i]) + (1.0 - beta1) * gi;
                        let v = beta2 * f64::from(slot.b[i]) + (1.0 - beta2) * gi * gi;
                        let update = match rect {
                            Some(r) => (m / bc1) * r * bc2.sqrt() / (v.sqrt() + eps),
                            None => m / bc1,
                        };
                        slot.a[i] = m as f32;
                        slot.b[i] = v as f32;
                        p[i] = (pi - lr * update) as f32;
                    }
                }
                Rule::Rprop {
                    eta_minus,
                    eta_plus,
                    step_min,
                    step_max,
                } => {
                    init(&mut slot.a, p.len());
                    if slot.b.is_empty() {
                        slot.b = vec![lr as f32; p.len()];
                    }
                    for i in 0..p.len() {
                        let mut gi = f64::from(g[i]);
                        let sign = gi * f64::from(slot.a[i]);
                        let mut step = f64::from(slot.b[i]);
                        if sign > 0.0 {
                            step = (step * eta_plus).min(step_max);
                        } else if sign < 0.0 {
                            step = (step * eta_minus).max(step_min);
                            gi = 0.0;
                        }
                        slot.b[i] = step as f32;
                        slot.a[i] = gi as f32;
                        if gi != 0.0 {
                            p[i] = (f64::from(p[i]) - gi.signum() * step) as f32;
                        }
                    }
                }
                Rule::Sgd { momentum, wd } => {
                    let first = slot.a.is_empty();
                    init(&mut slot.a, p.len());
                    for i in 0..p.len() {
                        let pi = f64::from(p[i]);
                        let gi = f64::from(g[i]) + wd * pi;
                        let buf = if first { gi } else { momentum * f64::from(slot.a[i]) + gi };
                        slot.a[i] = buf as f32;
                        p[i] = (pi - lr * buf) as f32;
                    }
                }
            }
        }
        if let Some(la) = &mut self.lookahead {
            for id in 0..store.params.len() {
                let Some(slow) = la.slow[id].as_mut() else { continue };
                if !store.is_trainable(id) {
                    continue;
                }
                let fast = &mut store.params[id].value.data;
                let slot_steps = self.slots[id].as_ref().map_or(0, |s| s.step);
                if slot_steps % la.k as u64 == 0 {
                    for (s, f) in slow.iter_mut().zip(fast.iter_mut()) {
                        *s = (f64::from(*s) + la.alpha * (f64::from(*f) - f64::from(*s))) as f32;
                        *f = *s;
                    }
                }
            }
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            spec: self.spec.clone(),
            base_lr: self.base_lr,
            lr: self.lr,
            steps: self.steps,
            slots: self.slots.clone(),
            lookahead: self.lookahead.clone(),
        }
    }

    pub fn load_state(&mut self, state: OptimizerState) -> Result<(), OptimError> {
        if state.spec != self.spec || state.slots.len() != self.slots.len() {
            return Err(OptimError::StateMismatch);
        }
        self.base_lr = state.base_lr;
        self.lr = state.lr;
        self.steps = state.steps;
        self.slots = state.slots;
        self.lookahead = state.lookahead;
        Ok(())
    }
}

fn init(buf: &mut Vec<f32>, n: usize) {
    if buf.is_empty() {
        *buf = vec![0.0; n];
    }
}
