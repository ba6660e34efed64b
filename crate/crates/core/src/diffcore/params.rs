use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => *t = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Adds the named parameter to a graph.
    pub fn bind(&self, graph: &mut Graph, name: &str, trainable: bool) -> Result<NodeId> {
        Ok(graph.param(name, self.get(name)?.clone(), trainable))
    }

    /// Glorot-uniform initialized tensor: `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Conv weight `[out, in, k, k]` plus zero bias `[out]`.
    pub fn init_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
        self.init_uniform(&format!("{prefix}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng);
        self.init_zeros(&format!("{prefix}.b"), &[cout]);
    }

    /// Transposed-conv weight `[in, out, k, k]` plus zero bias `[out]`.
    pub fn init_conv_transpose(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
        self.init_uniform(&format!("{prefix}.w"), &[cin, cout, k, k], cin * k * k, cout * k * k, rng);
        self.init_zeros(&format!("{prefix}.b"), &[cout]);
    }

    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        self.init_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
        self.init_zeros(&format!("{prefix}.b"), &[fan_out]);
    }
}
