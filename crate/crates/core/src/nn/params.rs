use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Optimizer group, e.g. `"encoder"` or `"decoder"`; selects the learning rate.
    pub group: String,
}

/// Named parameters of a model. Buffers (like batch-norm running statistics)
/// are stored as non-trainable entries.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), group, value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), "buffer", value, false)
    }

    fn insert(&mut self, name: String, group: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        self.push_param(Param {
            name,
            value,
            trainable,
            group: group.to_string(),
        })
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) && p.group != "buffer" {
                p.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable("", false);
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Replace values by name from `other`; names missing in `other` are
    /// left untouched. Returns the number of tensors copied.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> crate::Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(crate::Error::Shape(format!(
                        "parameter {}: {:?} vs {:?}",
                        p.name,
                        src.value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn push_param(&mut self, p: Param<T>) -> ParamId {
        assert!(!self.index.contains_key(&p.name), "duplicate parameter {}", p.name);
        let id = ParamId(self.params.len());
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        id
    }
}
