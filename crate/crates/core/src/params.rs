//! Named parameter registry and the small parameter groups layers are built from.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, ParamEntry { tensor, decay });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Total scalar count of entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, e)| e.tensor.numel()).sum()
    }

    /// Places every parameter on the graph as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.entries.values().map(|e| g.param(e.tensor.clone())).collect())
    }

    /// Places every parameter on the graph as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.entries.values().map(|e| g.constant(e.tensor.clone())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry { tensor: e.tensor.cast(), decay: e.decay }))
                .collect(),
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

pub const PROJ_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Weight `[d_in, d_out]` plus bias `[d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), trunc_normal(rng, &[d_in, d_out], PROJ_STD), true)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]), false)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Layer-norm affine pair.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl NormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.weight"), Tensor::ones(&[dim]), false)?;
        let beta = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), false)?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        let b = s.insert("b", Tensor::zeros(&[3]), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert_eq!((s.name(a), s.name(b)), ("a", "b"));
        assert_eq!(s.num_scalars(), 5);
        assert!(s.decays(a) && !s.decays(b));
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f64> = trunc_normal(&mut r1, &[1000], 0.02);
        let b: Tensor<f64> = trunc_normal(&mut r2, &[1000], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }
}
