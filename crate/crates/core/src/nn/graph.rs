//! A [`Graph`] ties a tape to a parameter store: parameters become named
//! leaves (bound once, reused), extra trainable variables (like grid features
//! during fine-tuning) can be attached by name, and `backward` produces a
//! complete name -> gradient map with zeros for parameters the loss never
//! touched.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::autodiff::{NodeId, Real, Tape, Tensor};

use super::{NnError, ParameterStore};

pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParameterStore<T>,
    bound: HashMap<String, NodeId>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new() }
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId, NnError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = self.tape.leaf(name, value);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Trainable leaf that is not in the store (e.g. grid features during
    /// per-scene fine-tuning). The name must not collide with anything bound.
    pub fn variable(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId, NnError> {
        if self.bound.contains_key(name) || self.store.contains(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = self.tape.leaf(name, value);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Reverse sweep; every bound name gets an entry (zeros if untouched).
    pub fn backward(&self, loss: NodeId) -> Result<NamedGradients<T>, NnError> {
        let mut raw = self.tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &self.bound {
            let g = raw
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(self.tape.value(id).shape()));
            grads.insert(name.clone(), g);
        }
        Ok(NamedGradients { grads })
    }
}

/// Gradients keyed by parameter/variable name, in sorted order.
#[derive(Debug)]
pub struct NamedGradients<T: Real> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NamedGradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
