use std::collections::BTreeMap;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors plus their accumulated gradients.
///
/// A store's scope prefixes its leaf names inside a [`Graph`], so several
/// networks with overlapping parameter names can be tracked in one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    rng_seed: u64,
    scope: String,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            rng_seed,
            ..Default::default()
        }
    }

    pub fn with_scope(mut self, scope: &str) -> Self {
        self.scope = scope.to_string();
        self
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Name of `name`'s leaf in a graph: `scope/name`, or `name` when unscoped.
    pub fn leaf_name(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.scope)
        }
    }

    fn local_name<'a>(&self, leaf: &'a str) -> Option<&'a str> {
        if self.scope.is_empty() {
            return (!leaf.contains('/')).then_some(leaf);
        }
        leaf.strip_prefix(self.scope.as_str())?.strip_prefix('/')
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::InvalidDimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        if self.get(name)?.shape() != grad.shape() {
            return Err(Error::InvalidDimension(format!("gradient shape mismatch for {name}")));
        }
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    /// Adds the graph's parameter gradients into the store. Gradients keep
    /// accumulating until [`ParamStore::zero_grad`].
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (leaf, g) in graph.param_grads() {
            let Some(name) = self.local_name(leaf) else { continue };
            if !self.params.contains_key(name) {
                continue;
            }
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => self.set_grad(name, g.clone())?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}
