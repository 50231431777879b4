//! Named parameter collections and their binding into a compute graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Storable, Tensor};

/// Every learnable tensor of a model, keyed by dotted name
/// (`enc1.lra.phi_q.weight`, `head.reg.1.bias`, ...). Iteration order is
/// the lexicographic name order, which fixes the archive layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
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

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ModelParams<T>) {
        self.tensors.extend(other.tensors);
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }
}

impl<T: Storable> ModelParams<T> {
    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Graph leaves for a [`ModelParams`], looked up by name.
#[derive(Clone)]
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds `other`'s leaves; names already present are kept.
    pub fn merge(mut self, other: Bound<'g, T>) -> Self {
        for (k, v) in other.vars {
            self.vars.entry(k).or_insert(v);
        }
        self
    }
}

/// Parameter initialization helper that writes straight into a store.
pub struct Init<'a, T, R> {
    pub store: &'a mut ModelParams<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Real, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ModelParams<T>, rng: &'a mut R) -> Self {
        Init { store, rng }
    }

    /// Uniform in ±`gain`·sqrt(3 / fan_in).
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.insert(name, t);
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, T::lit(value)));
    }

    /// Convolution kernel `c_out×c_in×k×k` plus bias `c_out`, under `{prefix}.weight` / `{prefix}.bias`.
    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize, gain: f64) {
        self.fan_in(
            &format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            gain,
        );
        self.full(&format!("{prefix}.bias"), &[c_out], 0.0);
    }

    /// Dense `rows×cols` matrix applied as `x·W`.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize, gain: f64) {
        self.fan_in(name, &[rows, cols], rows, gain);
    }

    /// Layer norm pair at identity: gamma = 1, beta = 0.
    pub fn norm(&mut self, prefix: &str, channels: usize) {
        self.full(&format!("{prefix}.gamma"), &[channels], 1.0);
        self.full(&format!("{prefix}.beta"), &[channels], 0.0);
    }
}
