//! Named parameter storage shared by every forward pass.

use std::collections::HashMap;

use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat table of named parameter arrays. Ids are stable for the lifetime of
/// a model and index the optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> ParamId {
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "param shape change");
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f32>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    // ---- initializers ----

    /// Xavier-uniform matrix `[rows, cols]` with fan = rows + cols.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt() as f32;
        let value = Array::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-a..a));
        self.add(name, value)
    }

    /// He-uniform convolution kernel `[co, ci, kh, kw]`.
    pub fn conv_kernel(
        &mut self,
        name: impl Into<String>,
        co: usize,
        ci: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let fan_in = (ci * k * k) as f64;
        let a = (6.0 / fan_in).sqrt() as f32;
        let value = Array::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| rng.gen_range(-a..a));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    /// Small-scale normal init, used for query/slot embeddings.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let value = Array::from_shape_fn(IxDyn(shape), |_| dist.sample(rng));
        self.add(name, value)
    }
}

/// One forward pass: a tape plus the binding of parameters to tape leaves.
/// Each parameter is bound at most once per pass so reuse accumulates
/// gradients on a single leaf.
pub struct Forward<'s> {
    pub tape: Tape<f32>,
    store: &'s ParamStore,
    bound: HashMap<usize, Value>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf bound to a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Value {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let v = self.tape.param(id.0, self.store.get(id).clone());
        self.bound.insert(id.0, v);
        v
    }
}
