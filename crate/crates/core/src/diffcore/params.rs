use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    pub trainable: bool,
}

/// Named parameter tensors with their gradient and momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialized tensor, `fan_in` inputs per output.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng, trainable: bool) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Array::from_fn(shape, |_| dist.sample(rng));
        self.add(name, value, trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values in parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix) && (!trainable_only || p.trainable))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f32) {
        for p in self.params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Tensors whose name starts with `prefix`, in insertion order.
    pub fn section(&self, prefix: &str) -> Vec<(String, Array)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites the values of every parameter under `prefix` in insertion order.
    pub fn load_section(&mut self, prefix: &str, tensors: &[Array]) -> Result<()> {
        let targets: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with(prefix))
            .collect();
        if targets.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "section {prefix}: expected {} tensors, found {}",
                targets.len(),
                tensors.len()
            )));
        }
        for (&i, t) in targets.iter().zip(tensors) {
            let p = &mut self.params[i];
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            p.velocity.fill(0.0);
        }
        Ok(())
    }
}

/// A forward pass over a [`ParamStore`]: records onto its own [`Graph`] and
/// remembers which leaves correspond to which parameters.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    train: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            train,
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.g.leaf(p.value.clone(), self.train && p.trainable);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    pub fn grads(&self) -> Gradients {
        let mut out: Vec<(ParamId, Array)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.g.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        Gradients(out)
    }
}

/// Parameter gradients detached from the session that produced them.
#[derive(Clone, Debug, Default)]
pub struct Gradients(Vec<(ParamId, Array)>);

impl ParamStore {
    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.0 {
            self.params[id.0]
                .grad
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }
}

/// Plain SGD update on slices: `velocity = momentum * velocity + grad; param -= lr * velocity`.
pub fn sgd_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be nonnegative, got {lr}")));
    }
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {} / grad {} / velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd { lr: 0.01, momentum: 0.9 }
    }
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.params.iter_mut().filter(|p| p.trainable) {
            sgd_step(p.value.data_mut(), &p.grad, &mut p.velocity, self.lr, self.momentum)?;
        }
        Ok(())
    }
}
