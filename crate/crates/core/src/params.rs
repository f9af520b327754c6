//! Named parameter storage, initialization and the small layer types built on it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// checkpoint manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl ParamStore<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Bind every parameter to `tape` by reference.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Same names and values at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap variables bound elsewhere, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Standard deviation for projection weights.
pub const PROJECTION_STD: f32 = 0.02;

/// Normal sample truncated to `[-2σ, 2σ]` by resampling.
pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform in `±1/√fan_in`, the usual default for convolution kernels.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / libm::sqrtf(fan_in as f32);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Registers parameters under a dotted name prefix with deterministic initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder whose names are prefixed by `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, tensor)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize, bias: bool) -> Linear {
        let w = trunc_normal(&[c_in, c_out], PROJECTION_STD, self.rng);
        let weight = self.add(&format!("{name}.weight"), w);
        let bias = bias.then(|| self.add(&format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Linear { weight, bias }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LayerNorm {
        let gamma = self.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.add(&format!("{name}.beta"), Tensor::zeros(&[c]));
        LayerNorm { gamma, beta }
    }

    /// Depthwise kernel bank `C × k × k`.
    pub fn depthwise(&mut self, name: &str, c: usize, k: usize) -> ParamId {
        let w = fan_in_uniform(&[c, k, k], k * k, self.rng);
        self.add(name, w)
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Conv {
        let w = fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        let weight = self.add(&format!("{name}.weight"), w);
        let bias = self.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias }
    }

    pub fn projection(&mut self, name: &str, c_in: usize, c_out: usize) -> ParamId {
        let w = trunc_normal(&[c_in, c_out], PROJECTION_STD, self.rng);
        self.add(name, w)
    }
}

/// `y = x·W (+ b)` on an `N × C_in` token matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

/// Convolution weights `C_out × C_in × k × k` with a per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}
