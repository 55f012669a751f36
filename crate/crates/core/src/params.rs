//! Named parameter storage shared by model construction, the optimizer, and
//! checkpoints. Insertion order is the canonical parameter order everywhere
//! (gradient collection, optimizer state, serialization).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable handle into a [`ParamStore`]; doubles as the index into the
/// per-step `Vec<Var>` and the optimizer state vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry<S: Scalar> {
    name: String,
    tensor: Tensor<S>,
    decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name. `decay` marks it as subject
    /// to weight decay (weights yes; biases and layer-norm parameters no).
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(Entry { name, tensor, decay });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    /// Total scalar count across all stored tensors.
    pub fn total_scalars(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    /// Total scalar count over parameters whose name passes the filter.
    pub fn scalars_where(&self, mut keep: impl FnMut(&str) -> bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| keep(&e.name))
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    /// Inserts every parameter into a graph in id order, as trainable params
    /// or frozen constants. The returned vector is indexed by `ParamId`.
    pub fn load_vars(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Pulls gradients for every parameter out of a backpropagated graph.
    /// Parameters that did not participate in the loss get `None`.
    pub fn collect_grads(&self, g: &mut Graph<S>, vars: &[Var]) -> Vec<Option<Tensor<S>>> {
        assert_eq!(vars.len(), self.entries.len(), "vars must mirror the store");
        vars.iter().map(|&v| g.take_grad(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_lookup() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let a = s.insert("w", Tensor::zeros(&[2, 3]), true).unwrap();
        let b = s.insert("b", Tensor::ones(&[3]), false).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.name(a), "w");
        assert!(s.decays(a));
        assert!(!s.decays(b));
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.id("missing"), None);
        assert_eq!(s.total_scalars(), 9);
        assert_eq!(s.scalars_where(|n| n == "b"), 3);
        assert!(s.insert("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn load_vars_and_collect_grads_round_trip() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let w = s.insert("w", Tensor::from_vec(vec![2.0, 3.0]), true).unwrap();
        let unused = s.insert("u", Tensor::from_vec(vec![1.0]), true).unwrap();
        let mut g = Graph::new();
        let vars = s.load_vars(&mut g, true);
        let loss = g.sum_all(vars[w.0]);
        g.backward(loss).unwrap();
        let grads = s.collect_grads(&mut g, &vars);
        assert_eq!(grads[w.0].as_ref().unwrap().data(), &[1.0, 1.0]);
        assert!(grads[unused.0].is_none());
    }
}
