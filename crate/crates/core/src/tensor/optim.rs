//! Named parameter storage and the AdamW optimiser.

use super::{Gradients, Tensor};
use crate::container::{Container, ContainerError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Stores every tensor under `{prefix}{name}`.
    pub fn write_to(&self, c: &mut Container, prefix: &str) -> Result<(), ContainerError> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            c.put_f64(&format!("{prefix}{name}"), &t.shape, t.data.clone())?;
        }
        Ok(())
    }

    /// Overwrites values from a container written by [`Self::write_to`];
    /// names and shapes must match.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<(), ContainerError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let (dims, data) = c.get_f64(&key)?;
            if dims != t.shape.as_slice() {
                return Err(ContainerError::Malformed {
                    name: key,
                    message: format!("stored shape {dims:?}, expected {:?}", t.shape),
                });
            }
            t.data = data.to_vec();
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from explicit per-parameter gradients (missing entries
    /// count as zero).
    pub fn step_with(&mut self, store: &mut ParamStore, grads: &[Option<&[f64]>]) {
        if self.m.is_empty() {
            self.m = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, t) in store.tensors.iter_mut().enumerate() {
            let g = grads.get(k).copied().flatten();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..t.data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                t.data[i] -= self.lr * self.weight_decay * t.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                t.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// One update from a reverse sweep.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let per: Vec<Option<&[f64]>> = store.ids().map(|id| grads.param(id)).collect();
        self.step_with(store, &per);
    }
}
