//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Image encoder; trained with the reduced backbone learning rate.
    Backbone,
    /// Everything else that trains.
    Head,
    /// Never updated (text encoder, initial backbone snapshot).
    Frozen,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (matrices yes, norms and biases no).
    pub decay: bool,
}

impl<T> ParamEntry<T> {
    pub fn trainable(&self) -> bool {
        self.group != ParamGroup::Frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            decay,
        });
        id
    }

    /// Weight matrix with scaled normal init (`std = 1 / sqrt(fan_in)`).
    pub fn weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(name, Tensor::randn(fan_in, fan_out, std, rng), group, true)
    }

    pub fn bias(&mut self, name: impl Into<String>, n: usize, group: ParamGroup) -> ParamId {
        self.insert(name, Tensor::zeros(1, n), group, false)
    }

    pub fn ones(&mut self, name: impl Into<String>, n: usize, group: ParamGroup) -> ParamId {
        self.insert(name, Tensor::filled(1, n, T::one()), group, false)
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

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable())
            .map(|e| e.value.len())
            .sum()
    }
}
