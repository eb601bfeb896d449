//! Named parameters and the layer helpers shared by both networks.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::Rng;

use crate::tape::{Gradients, Graph, Var};

/// Named parameter matrices. Iteration order is the name order, so every
/// traversal (optimizer, checkpoint) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Weight `in × out` drawn uniformly with variance `1 / in`, zero bias.
    pub fn init_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), Array2::zeros((1, fan_out)));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gain"), Array2::ones((1, dim)));
        self.insert(format!("{name}.bias"), Array2::zeros((1, dim)));
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Leaf for a stored parameter; panics on an unknown name, which is a
    /// programming error in the network definition.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.graph.leaf(value);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.graph.leaf(value)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        self.graph.linear(x, w, b)
    }

    /// `linear -> relu -> linear`.
    pub fn mlp(&mut self, name: &str, x: Var) -> Var {
        let h = self.linear(&format!("{name}.0"), x);
        let h = self.graph.relu(h);
        self.linear(&format!("{name}.1"), h)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Var {
        let g = self.param(&format!("{name}.gain"));
        let b = self.param(&format!("{name}.bias"));
        self.graph.layer_norm(x, g, b)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.graph.value(v)
    }

    /// Gradients of the bound parameters, by name. Parameters that took no
    /// part in the pass are absent.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Array2<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Registers an `mlp` block created by [`Session::mlp`].
pub fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) {
    store.init_linear(&format!("{name}.0"), dims[0], dims[1], rng);
    store.init_linear(&format!("{name}.1"), dims[1], dims[2], rng);
}
