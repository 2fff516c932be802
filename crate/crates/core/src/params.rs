//! Named parameter storage and per-step graph binding.

use std::ops::Index;

use fncgen_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a [`ParamSet`] in one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebinds from explicit handles, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl ParamSet {
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter into `g`; `trainable == false` binds constants
    /// so no gradient is computed for this network.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Adds the graph's leaf gradients into the parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        if bound.vars.len() != self.tensors.len() {
            return contract_err("binding does not belong to this parameter set");
        }
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces values by name and shape; every parameter must be present.
    pub fn load_values(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some((_, new)) = source.iter().find(|(n, _)| n == name) else {
                return contract_err(format!("missing parameter {name}"));
            };
            if new.shape() != t.shape() {
                return contract_err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    new.shape(),
                    t.shape()
                ));
            }
            t.data_mut().copy_from_slice(new.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

pub const INIT_STD: f64 = 0.02;

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .expect("non-empty parameter shape")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape.to_vec()).expect("non-empty parameter shape")
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        Tensor::ones(shape.to_vec()).expect("non-empty parameter shape")
    }
}
