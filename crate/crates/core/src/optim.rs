//! Named parameter collections and first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Graph handles for every tensor of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a parameter. New parameters are trainable.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let tensor = tensor.requires_grad(true);
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(_, t)| graph.input(t)).collect(),
        }
    }

    /// Adds the gradients of a backward pass into each parameter.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for ((_, t), v) in self.entries.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(*v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn zero_grads(params: &mut ParamSet) {
    params.zero_grads();
}

fn grad_of<'a>(name: &str, t: &'a Tensor) -> Result<&'a [f64]> {
    t.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))
}

/// Plain gradient descent: `p -= lr * grad`.
pub fn sgd_step(params: &mut ParamSet, learning_rate: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if t.is_trainable() {
            grad_of(name, t)?;
        }
    }
    for (_, t) in params.iter_mut() {
        if !t.is_trainable() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p -= learning_rate * g;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update at `learning_rate`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, hp: &AdamConfig, learning_rate: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if t.is_trainable() {
            grad_of(name, t)?;
        }
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (((_, t), m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !t.is_trainable() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        for (((p, g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= learning_rate * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear decay from `base_lr` at step 0 towards zero at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * frac
    }
}
