use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(contract(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), lookup: self.lookup.clone() }
    }
}

/// Per-parameter gradients, indexed like the store they came from.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.values.iter().map(|v| Some(Tensor::zeros(v.shape().to_vec()))).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0)?.as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, treating missing entries as zero.
    pub fn add_scaled(&mut self, other: &ParamGrads<T>, scale: T) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => d.data_mut().iter_mut().zip(src.data()).for_each(|(a, &b)| *a += scale * b),
                None => *dst = Some(src.map(|v| v * scale)),
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().flatten().flat_map(|t| t.data().iter()).map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// A tape bound to a parameter store. Parameters are placed on the tape the
/// first time they are used.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph whose parameter leaves require gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], train: true }
    }

    /// Graph for inference only: nothing requires gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { train: false, ..Self::new(params) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.train);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Backpropagates `loss` and collects the gradient of every parameter used.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.tape.backward(loss)?;
        let collected = self
            .bound
            .iter()
            .zip(&self.params.values)
            .map(|(b, value)| {
                b.map(|var| {
                    let data = grads.take(var).unwrap_or_else(|| vec![T::zero(); value.len()]);
                    Tensor::new(value.shape().to_vec(), data).expect("parameter gradient shape")
                })
            })
            .collect();
        Ok(ParamGrads { grads: collected })
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
