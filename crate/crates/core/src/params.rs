//! Named parameter tensors.

use std::collections::BTreeMap;

use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Learnable tensors keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    pub fn extend(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }

    /// Adds every tensor to `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Bound {
        self.bind_where(graph, requires_grad, |_| true)
    }

    /// Adds the tensors whose names pass `keep`; the others are never read.
    pub fn bind_where(&self, graph: &mut Graph, requires_grad: bool, keep: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, t)| (k.clone(), graph.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> crate::Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Fan-in scaled uniform weights, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
