use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named learnable tensors. Names are dotted paths
/// (`blocks.0.attn.wq`, `adapter.heads.1.w`, ...).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_grad(true));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Register `name` on the tape once and return its handle; later calls on
    /// the same tape reuse the binding.
    pub fn var(&self, tape: &Tape, name: &str) -> Result<Var> {
        if let Some(v) = tape.binding(name) {
            return Ok(v);
        }
        let v = tape.leaf(self.get(name)?.clone())?;
        tape.bind(name, v);
        Ok(v)
    }

    /// Add `scale ×` the tape gradients of every bound parameter into the
    /// stored `grad` buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, scale: f64) {
        for (name, v) in tape.bindings() {
            let Some(t) = self.tensors.get_mut(&name) else { continue };
            let Some(g) = tape.grad(v) else { continue };
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.numel()]);
            buf.iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Mark tensors trainable according to `keep`.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            t.requires_grad = keep(name);
        }
    }

    /// Add Gaussian noise to every tensor selected by `select`; used to move
    /// tests away from the zero-initialised fixed point.
    pub fn jitter<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64, select: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            if select(name) {
                for x in t.data_mut() {
                    *x += std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    /// Copy values (not gradients) for every name present in both stores.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, t) in self.tensors.iter_mut() {
            if let Some(src) = other.tensors.get(name) {
                if src.shape() == t.shape() {
                    t.data_mut().copy_from_slice(src.data());
                    n += 1;
                }
            }
        }
        n
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}
