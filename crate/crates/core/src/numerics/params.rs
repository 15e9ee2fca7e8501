use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Which parameter set a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Base network weights (W).
    Backbone,
    /// Gating networks (G).
    Gate,
    /// Early-exit branch classifiers.
    Branch,
    /// Non-trainable state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub momentum: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let momentum = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, group, value, momentum, grad: None });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalars in the given groups.
    pub fn num_scalars(&self, groups: &[ParamGroup]) -> usize {
        self.params.iter().filter(|p| groups.contains(&p.group)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.add_assign(&grad),
            None => p.grad = Some(grad),
        }
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Binds parameters onto a tape, creating each leaf once so that shared
/// weights accumulate gradients across every use.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: Vec<ParamGroup>,
    vars: HashMap<ParamId, Var>,
    perturbation: Option<(ParamId, usize, f64)>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[ParamGroup]) -> Self {
        Binder { store, trainable: trainable.to_vec(), vars: HashMap::new(), perturbation: None }
    }

    /// Adds `delta` to one element of one parameter whenever it is bound.
    /// The offset is applied after conversion to the tape's scalar type.
    pub fn with_perturbation(mut self, id: ParamId, index: usize, delta: f64) -> Self {
        self.perturbation = Some((id, index, delta));
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn bind<T: Real>(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let grad = self.trainable.contains(&p.group) && p.group != ParamGroup::Buffer;
        let mut value: Tensor<T> = p.value.cast();
        if let Some((pid, index, delta)) = self.perturbation {
            if pid == id {
                value.data_mut()[index] += T::lit(delta);
            }
        }
        let v = tape.leaf(value, grad);
        self.vars.insert(id, v);
        v
    }

    /// Current value of a parameter in the tape's scalar type, without binding it.
    pub fn value<T: Real>(&self, id: ParamId) -> Tensor<T> {
        self.store.get(id).value.cast()
    }

    /// Gradients for every bound trainable parameter, in parameter order.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.cast())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&k, &v)| (k, v))
    }
}

/// Kaiming-normal initialization for a weight with the given fan-in.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    gaussian(shape, std, rng)
}

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}
