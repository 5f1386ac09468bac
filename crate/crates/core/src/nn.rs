//! Parameters, layers and the Adam optimizer.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative slope of every LeakyReLU in the network.
pub const LRELU_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replace all values from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Shape(format!("checkpoint has {} parameters, model has {}", entries.len(), self.values.len())));
        }
        for (name, t) in entries {
            let id = self.find(&name).ok_or_else(|| Error::Shape(format!("unknown parameter {name} in checkpoint")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name}: checkpoint {:?} vs model {:?}", t.shape(), self.values[id.0].shape())));
            }
            self.values[id.0] = t;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Gain of identity-start branches under [`InitScheme::Dense`].
pub const DENSE_BRANCH_GAIN: f64 = 0.1;

/// How freshly built layers are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Kaiming-uniform everywhere except branches that start as an exact identity
    /// (residual tails, offset heads, gates); those start at zero.
    #[default]
    Standard,
    /// Every tensor random, biases included, so every parameter is reachable by
    /// gradients; identity-start branches get a reduced gain. Used to probe gradient flow.
    Dense,
}

/// Creates parameters in a store with a deterministic RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    scheme: InitScheme,
    prefix: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, scheme: InitScheme) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), scheme, prefix: Vec::new() }
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    /// Run `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / ((1.0 + LRELU_SLOPE * LRELU_SLOPE) * fan_in as f64)).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    fn bias(&mut self, n: usize, fan_in: usize) -> Tensor {
        match self.scheme {
            InitScheme::Standard => Tensor::zeros(&[n]),
            InitScheme::Dense => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&[n], |_| self.rng.gen_range(-bound..bound))
            }
        }
    }

    fn weight(&mut self, shape: &[usize], fan_in: usize, zero: bool) -> Tensor {
        match (zero, self.scheme) {
            (false, _) => self.kaiming(shape, fan_in),
            (true, InitScheme::Standard) => Tensor::zeros(shape),
            (true, InitScheme::Dense) => self.kaiming(shape, fan_in).scale(DENSE_BRANCH_GAIN),
        }
    }

    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
        self.conv2d_init(name, cin, cout, k, stride, false)
    }

    /// A conv whose weights start at zero under [`InitScheme::Standard`].
    pub fn conv2d_zero(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d {
        self.conv2d_init(name, cin, cout, k, stride, true)
    }

    fn conv2d_init(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv2d {
        let fan_in = cin * k * k;
        let w = self.weight(&[cout, cin, k, k], fan_in, zero);
        let b = self.bias(cout, fan_in);
        let w = self.store.add(self.full_name(&format!("{name}.weight")), w);
        let b = self.store.add(self.full_name(&format!("{name}.bias")), b);
        Conv2d { w, b, stride, pad: k / 2 }
    }

    pub fn conv3d(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv3d {
        let fan_in = cin * k * k * k;
        let w = self.kaiming(&[cout, cin, k, k, k], fan_in);
        let b = self.bias(cout, fan_in);
        let w = self.store.add(self.full_name(&format!("{name}.weight")), w);
        let b = self.store.add(self.full_name(&format!("{name}.bias")), b);
        Conv3d { w, b }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_init(name, fan_in, fan_out, false)
    }

    pub fn linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        self.linear_init(name, fan_in, fan_out, true)
    }

    fn linear_init(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = self.weight(&[fan_in, fan_out], fan_in, zero);
        let b = self.bias(fan_out, fan_in);
        let w = self.store.add(self.full_name(&format!("{name}.weight")), w);
        let b = self.store.add(self.full_name(&format!("{name}.bias")), b);
        Linear { w, b }
    }

    /// A free tensor parameter, zero under `Standard` init and small-uniform under `Dense`.
    pub fn table(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = match self.scheme {
            InitScheme::Standard => Tensor::zeros(shape),
            InitScheme::Dense => Tensor::from_fn(shape, |_| self.rng.gen_range(-0.5..0.5)),
        };
        self.store.add(self.full_name(name), t)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(g.param(self.w), Some(g.param(self.b)), self.stride, self.pad)
    }

    pub fn forward_lrelu<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward(g, x)?.leaky_relu(LRELU_SLOPE))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv3d(g.param(self.w), Some(g.param(self.b)))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Row-major dense layer: `(n x in) -> (n x out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(self.w))?.add_row_bias(g.param(self.b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Apply one update. `grads` follows the store's parameter order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
