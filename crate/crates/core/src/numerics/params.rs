use indexmap::{IndexMap, IndexSet};

use super::{Gradients, NumericsError, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Iteration order is insertion order, which keeps checkpoint layout and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.entries
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.entries.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Copies every parameter onto `tape` as a leaf. Parameters for which
    /// `trainable` returns false are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| tape.leaf(v.clone(), trainable(k)))
            .collect();
        Bound {
            vars,
            names: self.entries.keys().cloned().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    names: IndexSet<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, NumericsError> {
        self.names
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter in store order (zeros where none flowed).
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).numel()))
            .collect()
    }
}
