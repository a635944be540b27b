//! Named parameter storage and the per-forward binding session.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

use super::{Graph, Var};

/// Flat name -> tensor map holding the parameters of one trainable unit.
/// Insertion order is stable, which makes checkpoints and optimizer sweeps
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.values.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.values.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.values().map(|v| v.len()).sum()
    }

    /// Merges another store under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) {
        for (name, value) in other.values {
            self.insert(format!("{prefix}.{name}"), value);
        }
    }

    /// Overwrites every tensor with uniform draws in [lo, hi). Used by
    /// gradient checks to make zero-initialized layers exercise their
    /// backward paths.
    pub fn randomize(&mut self, lo: f64, hi: f64, rng: &mut ChaCha8Rng) {
        for value in self.values.values_mut() {
            value.mapv_inplace(|_| rng.gen_range(lo..hi));
        }
    }
}

/// Xavier-uniform tensor: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..bound))
}

/// One forward pass: binds parameters from a store into a graph on demand,
/// caching the leaf so repeated uses share a node (and gradients accumulate).
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: RefCell<IndexMap<String, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(graph: Graph, store: &'a ParamStore) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(IndexMap::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf var for a named parameter.
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return v.clone();
        }
        let var = self.graph.leaf(self.store.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    /// Parameter bound as a constant: it still feeds the forward pass but is
    /// excluded from gradient collection (frozen module support).
    pub fn frozen_param(&self, name: &str) -> Var {
        self.graph.leaf(self.store.get(name).clone())
    }

    /// Runs backward from `loss` and collects gradients for every bound
    /// parameter (zeros for parameters the loss does not reach).
    pub fn grads(&self, loss: &Var) -> IndexMap<String, ArrayD<f64>> {
        let grads = self.graph.backward(loss);
        self.bound
            .borrow()
            .iter()
            .map(|(name, var)| (name.clone(), grads.of(var)))
            .collect()
    }
}
