//! Named parameter storage, initialisation and the forward-pass context.
//!
//! Parameters are stored as `f32` (the checkpoint payload type) and promoted
//! to `f64` when bound into a [`Graph`]. All arithmetic happens in `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || expected != data.len() {
            return Err(Error::Shape(format!("tensor shape {shape:?} does not fit {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// 1-D tensors are viewed as a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("parameter tensors are 1-D or 2-D"),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = self.matrix_shape();
        Matrix::from_vec(r, c, self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ParamTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Overwrites `name` with a matrix value (rounded to `f32`), keeping its shape.
    pub fn set_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if t.matrix_shape() != m.shape() {
            return Err(Error::Shape(format!("{name}: expected {:?}, got {:?}", t.matrix_shape(), m.shape())));
        }
        for (d, &v) in t.data.iter_mut().zip(m.data()) {
            *d = v as f32;
        }
        Ok(())
    }

    /// Copies every tensor of `other` whose name and shape match one here.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParameterSet) -> usize {
        let mut copied = 0;
        for (name, t) in &other.tensors {
            if let Some(mine) = self.tensors.get_mut(name) {
                if mine.shape == t.shape {
                    mine.data.clone_from(&t.data);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for s in &t.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seeded parameter initialiser.
pub struct Initializer<'a> {
    params: &'a mut ParameterSet,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(params: &'a mut ParameterSet, seed: u64) -> Self {
        Self { params, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Xavier-uniform `d_in × d_out` weight, zero bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| self.rng.gen_range(-limit..limit) as f32).collect();
        self.params.insert(format!("{name}/weight"), ParamTensor { shape: vec![d_in, d_out], data });
        if bias {
            self.params.insert(format!("{name}/bias"), ParamTensor::zeros(vec![d_out]));
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params.insert(format!("{name}/gain"), ParamTensor { shape: vec![dim], data: vec![1.0; dim] });
        self.params.insert(format!("{name}/bias"), ParamTensor::zeros(vec![dim]));
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.params.insert(name, ParamTensor { shape, data });
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f32) {
        let n: usize = shape.iter().product();
        self.params.insert(name, ParamTensor { shape, data: vec![value; n] });
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(|m| m.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.grads.values_mut() {
            m.scale_in_place(s);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// A forward pass under construction: a graph plus lazily bound parameters.
///
/// In training mode dropout masks are drawn from the context's own seeded RNG,
/// so a forward pass is a pure function of (parameters, inputs, seed).
pub struct Forward<'p> {
    pub g: Graph,
    params: &'p ParameterSet,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Forward<'p> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(params: &'p ParameterSet) -> Self {
        Self { g: Graph::new(), params, bound: BTreeMap::new(), frozen: Vec::new(), rng: None }
    }

    /// Training mode: dropout active with masks drawn from `seed`.
    pub fn train(params: &'p ParameterSet, seed: u64) -> Self {
        Self { g: Graph::new(), params, bound: BTreeMap::new(), frozen: Vec::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// Parameters whose names start with any of `prefixes` are bound as
    /// constants and receive no gradient.
    pub fn freeze(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Binds a parameter into the graph (once per pass).
    ///
    /// Panics if the parameter does not exist; parameter sets are validated
    /// against their model configuration when built or loaded.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let m = t.to_matrix();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) { self.g.constant(m) } else { self.g.leaf(m) };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = self.g.value(x).shape();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.g.mul_const(x, Matrix::from_vec(r, c, mask))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.g.value(v)
    }

    /// Gradients of `loss` for every bound, non-frozen parameter.
    pub fn gradients(&self, loss: Var) -> Gradients {
        let mut raw = self.g.backward(loss);
        let mut grads = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(m) = raw.take(v) {
                grads.insert(name.clone(), m);
            }
        }
        Gradients { grads }
    }
}
