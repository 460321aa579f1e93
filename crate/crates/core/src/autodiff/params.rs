use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter of one store on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    store: u64,
    index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters plus their gradient and Adam moment buffers.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    steps: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
            steps: self.steps,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    /// Compares contents, not identity.
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.steps == other.steps
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
            steps: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter '{name}'")));
        }
        let (r, c) = value.shape();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(())
    }

    /// Inserts an `rows×cols` weight drawn uniformly from
    /// ±sqrt(6 / (fan_in + fan_out)).
    pub fn insert_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Result<()> {
        let bound = glorot_bound(rows, cols);
        let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
        self.insert(name, Tensor::new(rows, cols, data)?)
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&index| ParamKey { store: self.id, index })
    }

    pub(crate) fn value_by_key(&self, key: ParamKey) -> &Tensor {
        &self.params[key.index].value
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Completed Adam steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    /// Adds the gradients that belong to this store; entries keyed to other
    /// stores are ignored.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in grads.iter() {
            if key.store == self.id {
                self.params[key.index].grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the pre-clip norm when clipping happened.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Option<f64> {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
            Some(norm)
        } else {
            None
        }
    }

    /// One bias-corrected Adam update, then zeroes the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.fill(0.0);
        }
    }

    /// Bitwise snapshot of parameter values, for freeze checks.
    pub fn value_bits(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
