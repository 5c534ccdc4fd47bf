//! Named parameter storage, per-forward binding onto a tape, and the
//! first-order optimizer used by both training stages.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Parameters keyed by module path strings such as `block3.self_attn.Q`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) {
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor { rows, cols, data }
            }
        };
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Same names and shapes, all entries zero.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Rounds every entry through `f32`.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Binds parameters lazily onto a tape during one forward pass.
pub struct Binder<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<usize, Var>,
    track: bool,
}

impl<'p> Binder<'p> {
    /// `track = false` skips gradient bookkeeping (inference).
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Tape variable for the named parameter; panics on unknown names, which
    /// are programming errors in layer construction.
    pub fn p(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.bound.get(&idx) {
            return v;
        }
        let value = self.params.tensors[idx].clone();
        let v = if self.track {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(idx, v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backpropagates `loss` and collects gradients aligned with the store.
    pub fn gradients(&self, loss: Var) -> ParamGrads {
        let mut grads = self.tape.backward(loss);
        let mut out = ParamGrads::zeros_for(self.params);
        for (&idx, &v) in &self.bound {
            if let Some(g) = take_grad(&mut grads, v) {
                out.tensors[idx] = g;
            }
        }
        out
    }
}

fn take_grad(grads: &mut Gradients, v: Var) -> Option<Tensor> {
    grads.take(v)
}

/// Gradients aligned index-by-index with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_for(params: &ParamStore) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_true")]
    pub cosine_decay: bool,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: default_clip(),
            cosine_decay: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to zero at `total_steps`.
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || total_steps <= self.warmup_steps {
            return self.learning_rate;
        }
        let progress = (step - self.warmup_steps) as f64 / (total_steps - self.warmup_steps) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// Adam with decoupled weight decay.
pub struct Adam {
    config: OptimizerConfig,
    first: ParamGrads,
    second: ParamGrads,
    step: usize,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        Self {
            config,
            first: ParamGrads::zeros_for(params),
            second: ParamGrads::zeros_for(params),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &mut ParamGrads, total_steps: usize) {
        let c = &self.config;
        if c.grad_clip > 0.0 {
            let norm = grads.norm();
            if norm > c.grad_clip {
                grads.scale(c.grad_clip / norm);
            }
        }
        let lr = c.rate_at(self.step, total_steps);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads.tensors[k];
            let m = &mut self.first.tensors[k];
            let v = &mut self.second.tensors[k];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
    }
}
