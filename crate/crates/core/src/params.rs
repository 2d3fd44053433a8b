//! Named parameter storage shared by every trainable component.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat list of named tensors. Components keep [`ParamId`]s into it, so a
/// whole model (reasoner, bridge and imaginer) can share one store and one
/// optimizer while stages toggle which names are trainable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform init for a `(fan_in, fan_out, ..)` weight.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng64,
    ) -> ParamId {
        let bound = crate::math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), true)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), v), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks exactly the parameters matched by `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values from `other` by name. Every name in `self` must exist in
    /// `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            let src = &other.params[src.0].value;
            if src.shape() != p.value.shape() {
                return Err(Error::shape(alloc::format!(
                    "parameter {}: stored {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Copies values by name for the parameters whose name starts with `prefix`.
    pub fn load_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .find(&p.name)
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            p.value = other.params[src.0].value.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by parameter, detached from any graph. Supports
/// accumulation across several backward passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// L2 norm over the gradients whose parameter name satisfies `pred`.
    pub fn norm_where(&self, store: &ParamStore, pred: impl Fn(&str) -> bool) -> f64 {
        crate::math::sqrt(
            self.grads
                .iter()
                .filter(|(id, _)| pred(store.name(**id)))
                .map(|(_, g)| g.sq_norm())
                .sum(),
        )
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.grads.values().map(|g| g.sq_norm()).sum())
    }
}
