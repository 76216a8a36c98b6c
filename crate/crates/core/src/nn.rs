//! Named parameter storage and the two learnable layers every block is built from.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            bail!(
                Dimension,
                "parameter {}: shape {:?} expected, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            );
        }
        self.tensors[id.0] = tensor.with_requires_grad(true);
        Ok(())
    }

    /// Replaces every tensor from `(name, tensor)` pairs; names and shapes must match.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            bail!(Config, "expected {} parameters, got {}", self.tensors.len(), entries.len());
        }
        for (i, (name, tensor)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                bail!(Config, "parameter {i}: expected name {}, got {}", self.names[i], name);
            }
            self.set(ParamId(i), tensor)?;
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Places every parameter on `tape` as a constant (no gradients).
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic initialiser shared by all blocks of one model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Position-wise affine layer `x · W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/inp)`, zero bias.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let std = 1.0 / math::sqrt(inp.max(1) as f64);
        let weight = store.add(join(name, "weight"), init.normal(&[inp, out], std));
        let bias = bias.then(|| store.add(join(name, "bias"), Tensor::zeros(&[out])));
        Self { weight, bias, inp, out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.get(self.weight), self.bias.map(|b| bound.get(b)))
    }

    /// Sets `W = I` (square layers only) and `b = 0`.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.inp != self.out {
            bail!(Dimension, "identity needs a square layer, got {}x{}", self.inp, self.out);
        }
        store.set(self.weight, Tensor::eye(self.inp))?;
        if let Some(b) = self.bias {
            store.set(b, Tensor::zeros(&[self.out]))?;
        }
        Ok(())
    }
}

/// Layer normalisation with learnable gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(join(name, "gain"), Tensor::ones(&[dim])),
            bias: store.add(join(name, "bias"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.get(self.gain), bound.get(self.bias))
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        let mut s = String::from(prefix);
        s.push('.');
        s.push_str(leaf);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(7).normal(&[4, 4], 1.0);
        let b = Init::new(7).normal(&[4, 4], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn store_set_rejects_shape_change() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2, 2]));
        assert!(store.set(id, Tensor::zeros(&[3])).is_err());
        assert_eq!(store.find("w"), Some(id));
    }

    #[test]
    fn load_checks_names() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1]));
        let err = store.load(alloc::vec![("b".into(), Tensor::zeros(&[1]))]).unwrap_err();
        assert_eq!(err.kind(), "config");
    }
}
