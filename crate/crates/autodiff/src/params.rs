//! Named parameter storage shared by the optimizer and gradient checker.

use crate::array::Array;
use crate::error::{AdError, AdResult};
use crate::graph::{Graph, Var};

/// An ordered collection of named parameter arrays. Iteration order is the
/// registration order, which keeps serialization and optimizer updates
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> AdResult<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(AdError::DuplicateParameter(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> AdResult<&Array> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| AdError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> AdResult<&mut Array> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| AdError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Array> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self.entries.iter().map(|(_, a)| graph.param(a.clone())).collect();
        BoundParams { names: self.entries.iter().map(|(n, _)| n.clone()).collect(), vars }
    }
}

/// Graph handles for a bound [`ParamSet`], looked up by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> AdResult<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| AdError::UnknownParameter(name.to_string()))
    }

    /// Handles in registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
