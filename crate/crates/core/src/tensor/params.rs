use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

/// Learning-rate / freezing group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Vision and text stand-in backbones.
    Backbone,
    /// Alignment, encoder, decoder, and heads.
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}
