use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::tape::{Gradients, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Slot {
    value: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
}

/// Named trainable tensors plus their gradient accumulators.
///
/// Iteration order is the lexicographic order of names, which keeps
/// optimizer updates and serialisation deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let grad = Some(Tensor::zeros(value.shape()));
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        let slot = self
            .slots
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        slot.grad
            .as_ref()
            .ok_or_else(|| NumericsError::MissingGradient(name.to_string()))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = Some(Tensor::zeros(slot.value.shape()));
        }
    }

    /// Drops every gradient buffer; the next optimizer step fails until
    /// [`ParamStore::zero_grad`] is called.
    pub fn clear_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = None;
        }
    }

    /// Adds the gradients of every parameter node on `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (name, var) in graph.params() {
            let Some(g) = grads.get(*var) else { continue };
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
            match &mut slot.grad {
                Some(acc) => acc.add_assign(g),
                None => slot.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub(crate) fn iter_mut(
        &mut self,
    ) -> impl Iterator<Item = (&String, &mut Tensor, Option<&Tensor>)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k, &mut s.value, s.grad.as_ref()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .filter_map(|s| s.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for slot in self.slots.values_mut() {
                if let Some(g) = &mut slot.grad {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        norm
    }
}
