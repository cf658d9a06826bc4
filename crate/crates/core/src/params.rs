//! Named parameter storage and its per-forward binding onto a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian-initialized matrix with standard deviation `1/√fan_in`.
    pub fn insert_scaled_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same tensors with every element replaced by zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Checks that `other` has identical names and shapes, listing the differences otherwise.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let mine: BTreeMap<&str, &[usize]> = self.iter().map(|(n, t)| (n, t.shape())).collect();
        let theirs: BTreeMap<&str, &[usize]> = other.iter().map(|(n, t)| (n, t.shape())).collect();
        let mut bad: Vec<&str> = mine
            .iter()
            .filter(|(n, s)| theirs.get(*n) != Some(*s))
            .map(|(n, _)| *n)
            .collect();
        bad.extend(theirs.keys().filter(|n| !mine.contains_key(*n)));
        if bad.is_empty() && self.names == other.names {
            Ok(())
        } else {
            bad.sort_unstable();
            bad.dedup();
            Err(Error::Checkpoint(format!("mismatched parameters: {}", bad.join(", "))))
        }
    }

    /// Replaces the tensor values from another store with the same layout.
    pub fn load_from(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Registers every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients of the bound parameters, zero where no gradient reached.
    pub fn gradients(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Handles built from an explicit list, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

/// Elementwise mean of shape-consistent parameter snapshots.
pub fn average<T: Scalar>(snapshots: &[ParamStore<T>]) -> Result<ParamStore<T>> {
    let first = snapshots
        .first()
        .ok_or_else(|| invalid("average-checkpoints", "no snapshots"))?;
    for s in &snapshots[1..] {
        first.check_compatible(s)?;
    }
    // Running mean seeded with the first snapshot; bit-exact when all snapshots agree.
    let mut out = first.clone();
    for (i, acc) in out.tensors.iter_mut().enumerate() {
        let data = acc.data_mut();
        for (k, s) in snapshots.iter().enumerate().skip(1) {
            let count = T::of((k + 1) as f64);
            for (a, &v) in data.iter_mut().zip(s.tensors[i].data()) {
                if v != *a {
                    *a += (v - *a) / count;
                }
            }
        }
    }
    Ok(out)
}
