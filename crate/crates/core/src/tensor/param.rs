//! Named trainable parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_from};

pub const INIT_STD: f64 = 0.02;

/// A trainable leaf tensor with a unique dotted name.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Samples `n` values from a normal(0, std) truncated at two standard
/// deviations, seeded by `(seed, name)`.
pub fn init_truncated_normal(name: &str, seed: u64, n: usize, std: f64) -> Vec<f64> {
    let mut rng = rng_from(&[seed, hash_str(name)]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Ordered registry of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn push(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid("parameter", format!("duplicate name `{name}`")));
        }
        let tensor = Tensor::leaf(data, shape)?;
        self.params.push(Parameter {
            name,
            tensor: tensor.clone(),
        });
        Ok(tensor)
    }

    /// Weight matrix initialized from the truncated normal.
    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let name = name.into();
        let n = shape.iter().product();
        let data = init_truncated_normal(&name, self.seed, n, INIT_STD);
        self.push(name, data, shape)
    }

    /// Weight with an explicit standard deviation (fan-in scaled convolutions).
    pub fn weight_with_std(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let name = name.into();
        let n = shape.iter().product();
        let data = init_truncated_normal(&name, self.seed, n, std);
        self.push(name, data, shape)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name.into(), vec![0.0; n], shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.push(name.into(), vec![value; n], shape)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds uniform noise of the given amplitude to every value. Used by
    /// gradient checks to move biases off ReLU kinks.
    pub fn jitter(&self, amplitude: f64, seed: u64) {
        let mut rng = rng_from(&[seed, 0x6a17]);
        for p in &self.params {
            p.tensor.update_data(|d| {
                for v in d.iter_mut() {
                    *v += rng.random_range(-amplitude..amplitude);
                }
            });
        }
    }
}
