use std::collections::BTreeMap;

use super::array::DiffArray;
use super::graph::{Graph, ParamId, Var};
use crate::error::{Error, Result};

/// Ordered collection of named trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<DiffArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: DiffArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.arrays.push(array.into_trainable());
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DiffArray {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(DiffArray::len).sum()
    }

    /// Binds a parameter onto a graph, tracking gradients.
    pub fn bind(&self, graph: &mut Graph, id: ParamId) -> Var {
        graph.param(id, &self.arrays[id.0])
    }

    /// Adds the parameter gradients held by `graph` into each gradient slot.
    pub fn accumulate(&mut self, graph: &Graph) -> Result<()> {
        for (id, g) in graph.param_grads() {
            self.arrays
                .get_mut(id.0)
                .ok_or_else(|| Error::Index(format!("parameter {} not in store", id.0)))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies the parameter gradients out of `graph` so the graph can be
    /// dropped before they are applied.
    pub fn take_grads(graph: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        graph.param_grads().map(|(id, g)| (id, g.to_vec())).collect()
    }

    /// Adds gradients produced by [`take_grads`](Self::take_grads).
    pub fn accumulate_list(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.arrays
                .get_mut(id.0)
                .ok_or_else(|| Error::Index(format!("parameter {} not in store", id.0)))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.arrays.iter_mut().for_each(DiffArray::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.arrays
            .iter()
            .filter_map(|a| a.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let total = self.grad_norm();
        if total > max_norm && total > 0.0 {
            let s = max_norm / total;
            for a in &mut self.arrays {
                if let Some(g) = a.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        total
    }

    pub fn shapes(&self) -> BTreeMap<&str, &[usize]> {
        self.iter().map(|(n, a)| (n, a.shape())).collect()
    }
}
