//! Named parameter store. BTreeMap keeps iteration order deterministic, which
//! the seeded-training reproducibility guarantee depends on.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Register every parameter as a leaf on `tape`, in name order.
    pub fn lift(&self, tape: &Tape) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        ParamVars { map }
    }
}

/// Tape handles for a lifted [`ParamStore`].
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter var {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.map.iter().map(|(k, &v)| (k, v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            map: iter.into_iter().collect(),
        }
    }
}

/// Xavier-uniform weight matrix `rows × cols` (fan-in = rows, fan-out = cols).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Insert a linear layer `{prefix}.w` (in×out) and `{prefix}.b` (out).
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{prefix}.w"), xavier_uniform(rng, d_in, d_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

/// Insert layer-norm affine parameters `{prefix}.g` (ones) and `{prefix}.o` (zeros).
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.o"), Tensor::zeros(&[dim]));
}
