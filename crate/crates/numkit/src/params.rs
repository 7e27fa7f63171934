use std::sync::Arc;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

/// Named, ordered collection of trainable tensors.
///
/// Values sit behind `Arc` so graphs can reference them without copying;
/// mutation goes through copy-on-write once no graph holds them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &*e.value))
    }

    /// Zero tensors with the shape of every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect()
    }

    /// Flat view of all parameters in store order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Writes every parameter as `namespace/name`.
    pub fn export(&self, namespace: &str, ckpt: &mut Checkpoint) {
        for e in &self.entries {
            ckpt.put_tensor(format!("{namespace}/{}", e.name), &*e.value);
        }
    }

    /// Overwrites every parameter from `namespace/name` entries. Shapes must match.
    pub fn import(&mut self, namespace: &str, ckpt: &Checkpoint) -> Result<()> {
        for e in &mut self.entries {
            let key = format!("{namespace}/{}", e.name);
            let t: Tensor<T> = ckpt
                .tensor(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))??;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: expected shape {:?}, found {:?}",
                    e.value.shape(),
                    t.shape()
                )));
            }
            e.value = Arc::new(t);
        }
        Ok(())
    }
}
