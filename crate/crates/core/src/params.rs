//! Named parameter storage shared by every model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. running statistics) are stored and checkpointed but never
    /// updated by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable: false });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::raw(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Concatenated values of the trainable parameters in store order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.trainable).flat_map(|e| e.value.data().iter().copied()).collect()
    }

    pub fn load_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let need: usize = self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum();
        if need != flat.len() {
            return Err(Error::invalid(format!("expected {need} trainable values, got {}", flat.len())));
        }
        let mut off = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `name[shape]` per entry; used to report checkpoint mismatches.
    pub fn signature(&self) -> Vec<String> {
        self.entries.iter().map(|e| format!("{}{:?}", e.name, e.value.shape())).collect()
    }
}

/// Prefixes parameter names while a model registers its sub-blocks.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: impl Into<String>) -> Self {
        Scope { store, prefix: prefix.into() }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn sub(&mut self, part: &str) -> Scope<'_> {
        let prefix = self.name(part);
        Scope { store: self.store, prefix }
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let name = self.name(leaf);
        self.store.add_uniform(name, shape, fan_in, rng)
    }

    pub fn constant(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.store.add_buffer(name, value)
    }
}
