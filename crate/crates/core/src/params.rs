//! Named parameter tensors and their binding onto a graph.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Graph, Tensor, Var};

/// Ordered collection of named tensors. Order is insertion order and is the
/// order used by checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    /// Uniform in `±scale/√fan_in` where `fan_in` is the row count.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = scale / (rows as f64).sqrt();
        let t = Tensor::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-bound..=bound)));
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn insert_full(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Result<()> {
        self.insert(name, Tensor::full(rows, cols, T::of(v)))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(missing(name)),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a graph leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Bound {
            index: &self.index,
            vars,
        }
    }
}

impl<T> ParamStore<T> {
    /// Binds existing graph handles, one per tensor in store order. Used when
    /// the caller already created the leaves, as in gradient checks.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter handles, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            index: &self.index,
            vars,
        })
    }
}

fn missing(name: &str) -> Error {
    Error::Unknown {
        what: "parameter",
        name: name.to_string(),
    }
}

/// Graph handles for the tensors of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| missing(name))
    }

    /// The same binding with one parameter routed to another graph value.
    pub fn replaced(mut self, name: &str, var: Var) -> Result<Self> {
        let i = *self.index.get(name).ok_or_else(|| missing(name))?;
        self.vars[i] = var;
        Ok(self)
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter in store order; parameters the loss does
    /// not reach get zeros.
    pub fn gradients<T: Float>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}
