use std::ops::Index;

use rand::Rng;

use crate::error::{PastnError, Result};
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// `requires_grad == false` marks a frozen parameter.
    pub value: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }
}

/// Ordered collection of named parameters. Declaration order is the
/// checkpoint order and the optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut value: Tensor, trainable: bool) -> ParamId {
        value.set_requires_grad(trainable);
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]` from the stream named after the parameter.
    pub fn push_uniform(&mut self, seed: u64, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let mut rng = derive_rng(seed, name);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.push(name, t, true)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Records every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(&p.value)).collect())
    }

    /// Copies the tape's gradients into each trainable parameter's gradient slot.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            p.value.zero_grad();
            if p.trainable() {
                if let Some(g) = tape.grad(v) {
                    // shapes come from the same tensor
                    p.value.accumulate_grad(g.data()).expect("gradient shape");
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Replaces all values, checking names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(PastnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(PastnError::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            let trainable = p.trainable();
            p.value = v;
            p.value.set_requires_grad(trainable);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Handles in store order, e.g. leaves created by hand.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
