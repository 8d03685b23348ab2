//! Named trainable parameters and seeded initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// A trainable tensor together with its unique path name.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered registry of a model's parameters. Registration order is the
/// initialization order, so a seed fully determines every value.
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn register(&mut self, name: String, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let tensor = Tensor::parameter(shape, data)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            tensor: tensor.clone(),
        });
        Ok(tensor)
    }

    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance activations for unit
    /// variance inputs).
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..numel(shape))
            .map(|_| T::c(self.rng.random_range(-bound..bound)))
            .collect();
        self.register(name.into(), shape, data)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor<T>> {
        self.register(name.into(), shape, vec![T::zero(); numel(shape)])
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor<T>> {
        self.register(name.into(), shape, vec![T::one(); numel(shape)])
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies of all values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.tensor.to_vec()).collect()
    }

    pub fn restore(&self, values: &[Vec<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Input(format!(
                "snapshot holds {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(values) {
            let mut data = p.tensor.data_mut();
            if data.len() != v.len() {
                return Err(Error::Input(format!("snapshot size mismatch for {}", p.name)));
            }
            data.copy_from_slice(v);
        }
        Ok(())
    }
}

/// Prefix helper for hierarchical parameter names.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
