use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) are persisted but never optimized.
    pub trainable: bool,
}

/// Named, ordered collection of parameters and buffers.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: next_uid(),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: value.with_requires_grad(trainable),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Count of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records the parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, id: ParamId) -> Result<Var> {
        graph.bind(self.uid, id.0, self.params[id.0].value.clone())
    }

    /// Adds the gradients of every leaf bound from this store into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for b in graph.bindings().iter().filter(|b| b.store == self.uid) {
            if let Some(g) = graph.grad(b.var) {
                let p = &mut self.params[b.param];
                if p.trainable {
                    p.value.accumulate_grad(g);
                }
            }
        }
    }

    /// Drops every gradient buffer.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = p.value.grad() {
                if !g.is_empty() {
                    p.value.grad_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.value.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {:?}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// True when both stores hold bit-identical values under the same names.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// He-uniform initialization: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches by construction")
}
