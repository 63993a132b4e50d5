use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Rc<Tensor<T>>>,
}

/// Name and shape of one parameter, as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Rc::new(value));
        assert!(prev.is_none(), "parameter `{name}` declared twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub fn shared(&self, name: &str) -> Option<Rc<Tensor<T>>> {
        self.entries.get(name).cloned()
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(Rc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn manifest(&self) -> Vec<ParamInfo> {
        self.entries
            .iter()
            .map(|(name, t)| ParamInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(v.cast())))
                .collect(),
        }
    }
}

/// Gives a graph access to stored parameters.
///
/// A binder built with [`Binder::restricted`] refuses any parameter outside
/// its allowed prefixes; the evaluation path uses this to prove it never
/// reaches the pose network.
pub struct Binder<'g, 's, T> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    allowed: Option<Vec<String>>,
    bound: RefCell<BTreeMap<String, Var<'g, T>>>,
}

impl<'g, 's, T: Scalar> Binder<'g, 's, T> {
    /// Parameters become trainable leaves.
    pub fn trainable(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            graph,
            store,
            trainable: true,
            allowed: None,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Parameters become constants.
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(graph, store)
        }
    }

    /// Frozen binder limited to names starting with one of `prefixes`.
    pub fn restricted(graph: &'g Graph<T>, store: &'s ParamStore<T>, prefixes: &[&str]) -> Self {
        Self {
            allowed: Some(prefixes.iter().map(|p| p.to_string()).collect()),
            ..Self::frozen(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn param(&self, name: &str) -> Var<'g, T> {
        if let Some(allowed) = &self.allowed {
            assert!(
                allowed.iter().any(|p| name.starts_with(p.as_str())),
                "parameter access guard: `{name}` is outside {allowed:?}"
            );
        }
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .shared(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let var = if self.trainable {
            self.graph.leaf_shared(value)
        } else {
            self.graph.constant_shared(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Every parameter bound so far, by name.
    pub fn bound(&self) -> Vec<(String, Var<'g, T>)> {
        self.bound.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}

/// Seeded parameter initialization.
pub struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    /// Uniform in `[-bound, bound]`.
    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..=bound)))
    }
}
