//! Named parameter arrays and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};

/// Which optimisation stage owns a parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Encoder, decoder, mask token and every embedding table.
    Backbone,
    /// Prediction head.
    Head,
    /// `domain.spatial`, `domain.temporal`.
    DomainPrompts,
    /// `task.<name>.masked`, `task.<name>.unmasked`.
    TaskPrompts(String),
    /// Stored arrays that are never optimised (normalization statistics).
    Buffer,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("head.") {
            Self::Head
        } else if name.starts_with("domain.") {
            Self::DomainPrompts
        } else if let Some(rest) = name.strip_prefix("task.") {
            Self::TaskPrompts(rest.split('.').next().unwrap_or("").to_string())
        } else if name.starts_with("norm.") {
            Self::Buffer
        } else {
            Self::Backbone
        }
    }
}

/// Ordered map of parameter name to array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Array2<f64> {
        self.entries.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of entries whose name satisfies `pred`.
    pub fn count(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v.len()).sum()
    }

    /// Names whose arrays differ bitwise between `self` and `other`.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        for (name, a) in &self.entries {
            match other.entries.get(name) {
                Some(b) if bitwise_eq(a, b) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                out.push(name.clone());
            }
        }
        out
    }
}

pub fn bitwise_eq(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Deterministic initialisers drawing from a caller-owned generator.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(self.rng))
    }

    /// `N(0, 1/fan_in)` weights.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Array2<f64> {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

pub fn zeros_row(cols: usize) -> Array2<f64> {
    Array2::zeros((1, cols))
}

pub fn ones_row(cols: usize) -> Array2<f64> {
    Array2::ones((1, cols))
}

/// Lazily places parameters on a tape, marking only trainable ones as
/// requiring gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { store, trainable, bound: BTreeMap::new() }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &|_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.expect(name).clone();
        let v = tape.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Array2<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_vars(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_prefix() {
        assert_eq!(ParamGroup::of("encoder.gate.w1"), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("decoder.mask_token"), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("head.w3"), ParamGroup::Head);
        assert_eq!(ParamGroup::of("domain.spatial"), ParamGroup::DomainPrompts);
        assert_eq!(ParamGroup::of("task.kriging.masked"), ParamGroup::TaskPrompts("kriging".into()));
        assert_eq!(ParamGroup::of("norm.target"), ParamGroup::Buffer);
    }

    #[test]
    fn changed_names_detects_bit_flips() {
        let mut a = ParamStore::new();
        a.insert("x", Array2::from_elem((1, 2), 0.0));
        let mut b = a.clone();
        assert!(a.changed_names(&b).is_empty());
        b.get_mut("x").unwrap()[[0, 1]] = -0.0;
        assert_eq!(a.changed_names(&b), vec!["x".to_string()]);
    }
}
