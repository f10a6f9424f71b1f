//! Named parameter tensors and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Standard-normal weights.
    pub fn randn<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) {
        self.insert(name, Tensor::randn(shape, rng));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Put every tensor on `g`, as leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Parameters placed on a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.vars.values().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    /// One bias-corrected step on every parameter that has a gradient.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| crate::Error::Contract(format!("gradient for unknown parameter {name}")))?;
            ensure!(p.shape() == g.shape(), "gradient shape {:?} for {name} {:?}", g.shape(), p.shape());
            let m = self.m.get(name).cloned().unwrap_or_else(|| Tensor::zeros(g.shape()));
            let v = self.v.get(name).cloned().unwrap_or_else(|| Tensor::zeros(g.shape()));
            let m = m.zip_with(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
            let v = v.zip_with(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
            let step = m.zip_with(&v, |m, v| cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))?;
            params.insert(name.clone(), p.sub(&step)?);
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
