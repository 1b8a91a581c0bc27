//! Named parameter storage and binding of parameters onto a graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. Layers refer to them by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Weights (rank 4, `out×in×k×k`) drawn from `U(−b, b)` with
    /// `b = sqrt(6 / fan_in)`, giving variance `2 / fan_in`; every other
    /// parameter set to zero. Deterministic in `seed`.
    pub fn init_fan_in_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut self.values {
            if let [_, fan_in_ch, kh, kw] = *t.shape() {
                let fan_in = (fan_in_ch * kh * kw) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in t.data_mut() {
                    *v = T::from_f64(rng.random_range(-bound..bound));
                }
            } else {
                t.data_mut().fill(T::zero());
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.values {
            t.data_mut().fill(T::zero());
        }
    }

    /// Puts every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect()
    }
}
