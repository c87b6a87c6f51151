//! Flat, ordered registry of named parameters. Model components hold
//! `ParamId` handles; the optimizer and checkpoint code iterate the store in
//! registration order, which is therefore part of run determinism.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::array::Array;
use crate::diffcore::tape::{NodeId, Parameter, Tape};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(CoreError::Validation(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Push every parameter value as a tape leaf, in store order. Index the
    /// result by `ParamId.0`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Copy the tape's accumulated gradients back into the parameters,
    /// aligned with a `leaves` call on the same tape.
    pub fn pull_grads(&mut self, tape: &Tape, leaves: &[NodeId]) {
        for (p, &id) in self.params.iter_mut().zip(leaves) {
            p.grad = tape.grad(id);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Array::zeros(&p.value.shape);
        }
    }
}

/// Draw an array with i.i.d. N(0, std^2) entries.
pub fn scaled_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Array {
        shape: shape.to_vec(),
        data,
    }
}

/// Convenience for weight matrices: std = 1/sqrt(fan_in).
pub fn fan_in_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    scaled_normal(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}
