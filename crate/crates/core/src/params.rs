use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sigan_autodiff::{grad, Tensor, Var};

/// Named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every tensor on the tape; `trainable` decides whether gradients
    /// flow into them.
    pub fn bind(&self, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies every tensor from `other` whose name and shape match.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, t) in self.tensors.iter_mut() {
            if let Some(src) = other.get(name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// A [`ParamStore`] placed on the autodiff tape.
#[derive(Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn grads(&self, loss: &Var) -> BTreeMap<String, Tensor> {
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<&Var> = self.vars.values().collect();
        let gs = grad(loss, &vars, false);
        names
            .into_iter()
            .zip(gs)
            .map(|(n, g)| (n.clone(), g.value().clone()))
            .collect()
    }
}

/// Samples `N(mean, std)` entries.
pub fn normal_tensor(shape: &[usize], mean: f32, std: f32, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(mean, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Standard normal noise.
pub fn noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    normal_tensor(shape, 0.0, 1.0, rng)
}
