//! Parameter storage, layers and the SGD optimiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        self.tensors[id.0] = t;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Places every tensor on the graph, as a parameter when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Binding { vars }
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored name must
    /// be present with a matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<(), String> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if t.shape() != slot.shape() {
                return Err(format!("tensor {name}: expected shape {:?}, found {:?}", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`] bound on one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects gradients for every bound tensor, zeros where none flowed.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite deviation");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub(crate) fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cin_g = in_channels / spec.groups;
        let fan_in = (cin_g * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[out_channels, cin_g, kernel, kernel], (2.0 / fan_in).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, spec, in_channels, out_channels }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }
}

/// Per-sample group normalisation with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count up to `max_groups` that divides
    /// `channels` into groups of at least two, so a 1×1 map never normalises
    /// a lone value to zero.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.clamp(1, channels)).rev().find(|g| channels % g == 0 && channels / g >= 2).unwrap_or(1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::new(vec![channels], vec![1.0; channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for weight and bias.
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(rng, &[out_features, in_features], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_tensor(rng, &[out_features], bound)));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Var {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine annealing restarted every `period` epochs, evaluated at
    /// fractional epochs.
    CosineWarmRestarts { period: f64, min_lr: f64 },
}

impl Schedule {
    pub fn lr(&self, base_lr: f64, epoch: f64) -> f64 {
        match *self {
            Schedule::Constant => base_lr,
            Schedule::CosineWarmRestarts { period, min_lr } => {
                let t = epoch.rem_euclid(period) / period;
                min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// SGD with momentum and coupled L2 weight decay:
/// `g ← g + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        for ((param, grad), vel) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}
