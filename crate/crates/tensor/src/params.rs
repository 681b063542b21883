use indexmap::IndexMap;

use crate::error::{config, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor<f32>,
    /// Trainable weights get gradients and optimizer state; buffers (e.g.
    /// batch-norm running statistics) do not.
    pub trainable: bool,
}

/// Ordered, named parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters {
    entries: IndexMap<String, ParamEntry>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.insert(name.into(), ParamEntry { tensor, trainable: true });
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.insert(name.into(), ParamEntry { tensor, trainable: false });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(t) => Ok(t),
            None => config(format!("missing parameter {name}")),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Put a trainable weight on the tape: as a named gradient-receiving
    /// leaf when `train` is set, otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape<f32>, name: &str, train: bool) -> Result<Var> {
        let t = self.require(name)?.clone();
        Ok(if train { tape.param(name, t) } else { tape.constant(t) })
    }

    /// Flat little-endian-agnostic copy of every value, for equality checks.
    pub fn flat_values(&self) -> Vec<f32> {
        self.entries.values().flat_map(|e| e.tensor.data().iter().copied()).collect()
    }
}
