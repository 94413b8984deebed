//! Named parameters and non-learned buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; counted in parameter tables.
    Weight,
    /// Running statistic or similar state; never trainable, never counted.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Real> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Flat, ordered collection of a model's tensors, addressed by [`ParamId`]
/// and by unique hierarchical name (`backbone.block3.attn.qkv.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a learnable weight. New weights start non-trainable; modes
    /// decide what trains.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), tensor, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), tensor, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(false),
            kind,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn weights(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Weight)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        if p.kind == ParamKind::Weight {
            p.tensor.set_requires_grad(trainable);
        }
    }

    /// Sets every weight whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.tensor.set_requires_grad(trainable);
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(false);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.weights()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.weights().map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Sum of element counts over weights whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str, trainable_only: bool) -> usize {
        self.weights()
            .filter(|(_, p)| p.name.starts_with(prefix) && (!trainable_only || p.trainable()))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Order-sensitive digest of every weight whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        // FNV-1a over names and bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (_, p) in self.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            p.name.bytes().for_each(&mut mix);
            for v in p.tensor.data() {
                v.bits().to_le_bytes().into_iter().for_each(&mut mix);
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast::<U>().with_requires_grad(p.trainable()),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn buffers_never_train_and_are_not_counted() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("w", Tensor::zeros(&[3])).unwrap();
        let b = s.add_buffer("running", Tensor::zeros(&[5])).unwrap();
        s.set_trainable(w, true);
        s.set_trainable(b, true);
        assert!(!s.get(b).trainable());
        assert_eq!(s.trainable_count(), 3);
        assert_eq!(s.weight_count(), 3);
    }

    #[test]
    fn checksum_tracks_content() {
        let mut s = ParamStore::<f32>::new();
        let w = s.add("backbone.w", Tensor::zeros(&[3])).unwrap();
        let before = s.checksum_prefix("backbone.");
        s.tensor_mut(w).data_mut()[1] = 1.0;
        assert_ne!(before, s.checksum_prefix("backbone."));
    }
}
