//! Named parameter store with Adam state, plus the tape binding that ties
//! store entries to graph leaves.

use std::collections::BTreeMap;

use super::tape::{Grads, Graph, NodeId};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub trainable: bool,
    pub grad_seen: bool,
}

/// Map name -> (value, grad, Adam moments). Iteration order is the sorted
/// name order, so updates and merges are deterministic.
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    step_count: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new(), step_count: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(&shape),
                adam_m: Tensor::zeros(&shape),
                adam_v: Tensor::zeros(&shape),
                trainable: true,
                grad_seen: false,
            },
        );
    }

    pub fn set_trainable(&mut self, name: &str, flag: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.trainable = flag;
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Register every parameter as a leaf of `graph`; trainable entries are
    /// differentiable. One binding per graph keeps weight sharing intact:
    /// repeated forward passes reuse the same leaf, so fan-out gradients sum.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, e) in &self.entries {
            let id = graph.leaf(e.value.clone().requires_grad(e.trainable));
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }

    /// grad += scale * tape gradient, for every bound parameter.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Grads<T>, scale: T) -> Result<()> {
        for (name, id) in &binding.ids {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("binding references unknown '{name}'")))?;
            if !e.trainable {
                continue;
            }
            match grads.get(*id) {
                Some(g) => {
                    e.grad.axpy(scale, g)?;
                    e.grad_seen = true;
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(T::zero());
            e.grad_seen = false;
        }
    }

    /// Standard Adam with bias correction. Gradients are zeroed after the
    /// step and the step counter increments.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, e) in &self.entries {
            if e.trainable && !e.grad_seen {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = T::of_f64(cfg.beta1);
        let b2 = T::of_f64(cfg.beta2);
        let eps = T::of_f64(cfg.eps);
        let corr1 = T::of_f64(1.0 - cfg.beta1.powi(t as i32));
        let corr2 = T::of_f64(1.0 - cfg.beta2.powi(t as i32));
        let lr = T::of_f64(cfg.lr);
        let one = T::one();
        for e in self.entries.values_mut() {
            if !e.trainable {
                continue;
            }
            for i in 0..e.value.len() {
                let g = e.grad.data()[i];
                let m = b1 * e.adam_m.data()[i] + (one - b1) * g;
                let v = b2 * e.adam_v.data()[i] + (one - b2) * g * g;
                e.adam_m.data_mut()[i] = m;
                e.adam_v.data_mut()[i] = v;
                let mhat = m / corr1;
                let vhat = v / corr2;
                e.value.data_mut()[i] = e.value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            e.grad.data_mut().fill(T::zero());
            e.grad_seen = false;
        }
        Ok(())
    }

    pub fn to_f32(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.to_f32());
            out.set_trainable(name, e.trainable);
        }
        out.step_count = self.step_count;
        out
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.to_f64());
            out.set_trainable(name, e.trainable);
        }
        out.step_count = self.step_count;
        out
    }

    pub(crate) fn entries(&self) -> &BTreeMap<String, ParamEntry<T>> {
        &self.entries
    }
}

/// Parameter-name -> leaf-node map for one graph.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Cosine decay from `base` to `floor_frac * base` over `total` steps.
pub fn cosine_lr(base: f64, floor_frac: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let floor = base * floor_frac;
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}
