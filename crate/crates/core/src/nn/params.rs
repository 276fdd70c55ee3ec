use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::rng::RngStream;
use crate::tensor::{Gradients, Graph, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

/// Named, ordered parameter storage. Model structs hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            shape,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen or not.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Overwrites every value with random draws: gains around one, the rest
    /// around zero. Used to exercise paths that zero-initialized projections
    /// would otherwise switch off.
    pub fn randomize(&mut self, rng: &RngStream, std: f64) {
        for e in &mut self.entries {
            let mut r = rng.split(&e.name);
            let is_gain = e.name.ends_with(".gain");
            for v in &mut e.value {
                *v = if is_gain { 1.0 + std * r.normal() } else { std * r.normal() };
            }
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &[ParamEntry]) -> Result<()> {
        if other.len() != self.entries.len() {
            return usage_err(format!(
                "expected {} parameters, got {}",
                self.entries.len(),
                other.len()
            ));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return usage_err(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                ));
            }
            mine.value.clone_from(&theirs.value);
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix. Each parameter's initial
/// values come from a stream split off by its full name, so they do not
/// depend on registration order.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a RngStream,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a RngStream) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = self.full(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Truncated-normal initialized parameter.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let full = self.full(name);
        let mut r = self.rng.split(&full);
        let n = shape.iter().product();
        let value = (0..n).map(|_| r.trunc_normal(std)).collect();
        self.store.add(full, shape.to_vec(), value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full(name);
        let n = shape.iter().product();
        self.store.add(full, shape.to_vec(), vec![v; n])
    }
}

/// Binds a [`ParamStore`] to one forward pass. With a graph, trainable
/// parameters become differentiable leaves; without one every parameter is
/// a constant and no tape is built.
pub struct Session<'a> {
    store: &'a ParamStore,
    graph: Option<Graph>,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Session<'a> {
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store,
            graph: None,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn training(store: &'a ParamStore, graph: &Graph) -> Self {
        Self {
            store,
            graph: Some(graph.clone()),
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        if let Some(t) = &self.bound.borrow()[id.0] {
            return t.clone();
        }
        let e = self.store.get(id);
        let constant = Tensor::from_parts(e.shape.clone(), e.value.clone());
        let t = match &self.graph {
            Some(g) if e.trainable => g.track(&constant),
            _ => constant,
        };
        self.bound.borrow_mut()[id.0] = Some(t.clone());
        t
    }

    /// Gradient per parameter, indexed like the store. Frozen parameters and
    /// parameters this pass never touched report `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        let bound = self.bound.borrow();
        self.store
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if !e.trainable {
                    return None;
                }
                let t = bound[i].as_ref()?;
                t.is_tracked().then(|| grads.get_or_zeros(t))
            })
            .collect()
    }
}
