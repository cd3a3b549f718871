use super::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Which task a parameter serves: shared, contrastive-specific or
/// predictive-specific.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Shared,
    Contrastive,
    Predictive,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::Contrastive => "contrastive",
            Group::Predictive => "predictive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(Group::Shared),
            "contrastive" => Some(Group::Contrastive),
            "predictive" => Some(Group::Predictive),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    group: Group,
    trainable: bool,
    tensor: Tensor<T>,
}

/// Named parameter tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, group: Group, trainable: bool, tensor: Tensor<T>) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            trainable,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, group: Group, tensor: Tensor<T>) -> ParamId {
        self.push(name, group, true, tensor)
    }

    pub fn add_buffer(&mut self, name: &str, group: Group, tensor: Tensor<T>) -> ParamId {
        self.push(name, group, false, tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.group == group)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Number of trainable scalars.
    pub fn total(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Registers every trainable tensor as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound<'_, T> {
        let vars = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| graph.leaf(e.tensor.clone(), requires_grad)))
            .collect();
        Bound { store: self, vars }
    }
}

/// A store bound into one graph.
pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf for a trainable parameter.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("{} is a buffer", self.store.name(id)))
    }

    /// Buffer value (not part of the graph).
    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    /// Per-parameter gradients, `None` where no gradient reached the leaf.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
