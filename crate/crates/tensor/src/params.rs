use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers `value` under `name`. Panics on duplicate names, which can
    /// only come from a wiring bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`.
    pub fn add_init(&mut self, name: impl Into<String>, shape: Shape, fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites the value stored under `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
        let cur = self.values[id.0].shape();
        if cur != value.shape() {
            return Err(TensorError::dim("set_param", cur, value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Copies every entry of `src` into `self` under `prefix + name`. All
    /// target names must already exist with matching shapes.
    pub fn load_prefixed(&mut self, prefix: &str, src: &ParamStore) -> Result<()> {
        for (_, name, value) in src.iter() {
            self.set(&format!("{prefix}{name}"), value.clone())?;
        }
        Ok(())
    }

    /// The entries whose names start with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.add(rest, value.clone());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Forward-pass context: a graph plus lazily created leaf nodes for the
/// parameters of one store.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// Parameters become gradient-carrying leaves.
    pub fn train(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Ctx {
            bound: vec![None; store.len()],
            graph,
            store,
            trainable: true,
        }
    }

    /// Parameters become constants.
    pub fn inference(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Ctx {
            trainable: false,
            ..Ctx::train(graph, store)
        }
    }

    /// Uses existing graph nodes for every parameter, in store order. Lets
    /// gradient checks drive a model through externally created leaves.
    pub fn with_nodes(graph: &'a mut Graph, store: &'a ParamStore, nodes: &[NodeId]) -> Self {
        assert_eq!(nodes.len(), store.len(), "one node per parameter");
        Ctx {
            bound: nodes.iter().copied().map(Some).collect(),
            graph,
            store,
            trainable: true,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Node for parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let node = self.graph.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(node);
        node
    }

    /// Parameter adjoints indexed by [`ParamId`]; `None` for parameters that
    /// did not influence the loss.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|n| grads.get(n).cloned()))
            .collect()
    }
}
