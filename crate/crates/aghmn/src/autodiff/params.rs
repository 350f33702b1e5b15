//! Named parameter storage and its binding into graphs.
//!
//! A [`ParamSet`] owns the model's trainable tensors. Each forward pass binds
//! them into a fresh [`Graph`] as leaf nodes; after `backward`, the gradients
//! are pulled back out keyed by the same names.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Uniquely named trainable tensors plus the RNG used to initialize them.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inserts a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Registers a fresh tensor drawn uniformly from `[-bound, bound)`.
    ///
    /// Draws come from the set's own seeded RNG, so registration order fixes
    /// the initialization.
    pub fn register_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Leaf bindings of a [`ParamSet`] inside one graph.
pub struct Bound {
    map: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound in this graph")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

impl Graph {
    /// Copies every parameter into this graph as a leaf node.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let mut map = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let id = self.leaf(tensor.clone());
            map.insert(name.clone(), id);
        }
        Bound { map }
    }

    /// Gradient per bound parameter after `backward`. Parameters the loss
    /// never reached get zero gradients.
    pub fn extract_grads(&self, bound: &Bound) -> GradMap {
        let mut grads = GradMap::new();
        for (name, &id) in bound.iter() {
            let g = match self.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(id).shape()),
            };
            grads.insert(name.clone(), g);
        }
        grads
    }
}
