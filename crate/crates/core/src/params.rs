//! Named parameter storage and initialization.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::real::Real;
use crate::rng::{derive_rng, truncated_normal};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered set of named tensors. Ids are stable for the lifetime of the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: BTreeMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a tensor. Re-registering a name replaces its value and keeps the id.
    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = tensor;
            return ParamId(i);
        }
        let i = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), i);
        ParamId(i)
    }

    /// Truncated-normal initialization drawn from a stream keyed by `(seed, name)`,
    /// so adding unrelated parameters never perturbs existing ones.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let mut rng = derive_rng(seed, name);
        let data = (0..n).map(|_| R::of(truncated_normal(&mut rng, std))).collect();
        self.insert(name, Tensor::new(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::full(shape, R::one()))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies every tensor of `other` whose name exists here with the same shape,
    /// except names starting with any prefix in `skip`. Returns copied names.
    pub fn load_from(&mut self, other: &ParamStore<R>, skip: &[&str]) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, t) in other.iter() {
            if skip.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if let Some(id) = self.id(name) {
                if self.get(id).shape() == t.shape() {
                    self.tensors[id.0] = t.clone();
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters that did not
/// take part in the loss or were frozen.
#[derive(Debug, Clone)]
pub struct ParamGrads<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> ParamGrads<R> {
    pub fn empty(n: usize) -> Self {
        ParamGrads { grads: (0..n).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Tensor<R>) {
        if self.grads.len() <= id.0 {
            self.grads.resize_with(id.0 + 1, || None);
        }
        self.grads[id.0] = Some(g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<R>) {
        if self.grads.len() <= id.0 {
            self.grads.resize_with(id.0 + 1, || None);
        }
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.grads.iter().flatten() {
            for &x in g.data() {
                s += x.f64() * x.f64();
            }
        }
        libm::sqrt(s)
    }

    pub fn scale(&mut self, factor: R) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}
