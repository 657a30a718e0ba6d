use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameter tensors with gradient slots.
///
/// Initialization draws from a ChaCha stream seeded once at construction, so
/// registering the same layers in the same order reproduces every value.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; for layers followed by ReLU.
    KaimingUniform,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`; for linear projections.
    XavierUniform,
    Zeros,
    Ones,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let bound = match init {
            Init::KaimingUniform => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
            Init::Zeros | Init::Ones => 0.0,
        };
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            _ => (0..len)
                .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
                .collect(),
        };
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Overwrites every gradient slot; parameters absent from `grads` get zero.
    pub fn set_grads(&mut self, grads: Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(grads.slots) {
            match g {
                Some(g) => p.grad = g,
                None => p.grad.data_mut().iter_mut().for_each(|x| *x = T::zero()),
            }
        }
    }

    /// Same names, shapes and values in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Copies values from `other` for every parameter whose name matches.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::shape(format!(
                        "parameter `{}` has shape {:?}, source has {:?}",
                        p.name,
                        p.value.shape(),
                        src.value.shape()
                    )));
                }
                p.value = src.value.clone();
            }
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }
}
