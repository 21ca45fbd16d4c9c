//! Named parameter storage and SGD with momentum.
//!
//! Parameters live in a `BTreeMap` so every iteration order is
//! deterministic; that property is what makes checkpoints and metrics
//! byte-reproducible across runs.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Graph;
use crate::autodiff::NodeId;

/// All trainable state of a model, keyed by hierarchical names like
/// `backbone.mid0.w` or `ffa.query.c004`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "parameter registered twice: {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Enter a parameter into a graph; `frozen` parameters become plain
    /// constants so they provably receive no gradient.
    pub fn leaf(&self, g: &mut Graph, name: &str, frozen: &FreezePolicy) -> NodeId {
        g.param(name, self.get(name).clone(), !frozen.is_frozen(name))
    }
}

/// Freezing is expressed as a set of name prefixes. A parameter is frozen
/// when any prefix matches the start of its name.
#[derive(Clone, Debug, Default)]
pub struct FreezePolicy {
    prefixes: BTreeSet<String>,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.prefixes.insert(prefix.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn prefixes(&self) -> impl Iterator<Item = &String> {
        self.prefixes.iter()
    }
}

/// Plain SGD with momentum. Velocity buffers are created lazily per
/// parameter and keyed by name, so freezing simply means no entry.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Array2<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, grad) in grads {
            let p = store.get_mut(name);
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = g + &*p * self.weight_decay;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            *v = &*v * self.momentum + &g;
            *p = &*p - &(&*v * self.lr);
        }
    }
}

/// Seeded normal sampling via Box-Muller; enough for weight init and keeps
/// the dependency set small.
pub fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

/// He-style init for an affine/conv weight with the given fan-in.
pub fn he_matrix(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
    normal_matrix(rng, rows, cols, (2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_plain_step() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, 2.0]]);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[1.0, -1.0]]);
        opt.step(&mut store, &grads);
        assert_eq!(store.get("w"), &array![[0.9, 2.1]]);
    }

    #[test]
    fn freeze_prefix_matches() {
        let mut f = FreezePolicy::none();
        f.freeze_prefix("backbone.");
        assert!(f.is_frozen("backbone.mid0.w"));
        assert!(!f.is_frozen("rpn.conv.w"));
    }

    #[test]
    fn normal_sampling_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let ma = normal_matrix(&mut a, 3, 3, 0.5);
        let mb = normal_matrix(&mut b, 3, 3, 0.5);
        assert_eq!(ma, mb);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.0]]);
        store.insert("w", array![[0.0]]);
    }
}
