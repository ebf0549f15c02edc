//! Parameterized layers. Each layer owns only its name and hyperparameters;
//! the values live in a [`ParamStore`] so one set of layer descriptions can
//! be applied to any snapshot of weights.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{conv_out_size, Graph, Var};
use crate::efficiency::Cost;
use crate::error::{FlexError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Self { name: name.into(), in_channels, out_channels, kernel, stride, pad, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-uniform weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.insert_param(self.weight_name(), uniform(rng, &shape, bound));
        if self.bias {
            store.insert_param(self.bias_name(), Tensor::zeros(&[self.out_channels]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = self.bias.then(|| g.param(store, &self.bias_name()));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias { self.out_channels } else { 0 }
    }

    /// Cost for one sample shaped [C, H, W]; returns the output shape too.
    pub fn cost(&self, input: [usize; 3]) -> Result<(Cost, [usize; 3])> {
        let [c, h, w] = input;
        if c != self.in_channels {
            return Err(FlexError::ShapeInvalid(format!(
                "{}: expected {} input channels, got {}",
                self.name, self.in_channels, c
            )));
        }
        let ho = conv_out_size(h, self.kernel, self.stride, self.pad);
        let wo = conv_out_size(w, self.kernel, self.stride, self.pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(FlexError::ShapeInvalid(format!(
                "{}: input {}x{} smaller than kernel {}",
                self.name, h, w, self.kernel
            )));
        };
        let outputs = (self.out_channels * ho * wo) as u64;
        let macs = outputs * (self.in_channels * self.kernel * self.kernel) as u64;
        let flops = 2 * macs + if self.bias { outputs } else { 0 };
        Ok((Cost::new(self.num_params() as u64, flops), [self.out_channels, ho, wo]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert_param(self.gamma_name(), Tensor::full(&[self.channels], 1.0));
        store.insert_param(self.beta_name(), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.running_mean_name(), Tensor::zeros(&[self.channels]));
        store.insert_buffer(self.running_var_name(), Tensor::full(&[self.channels], 1.0));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, &self.gamma_name());
        let beta = g.param(store, &self.beta_name());
        let rm = store.buffer(&self.running_mean_name()).expect("running mean buffer");
        let rv = store.buffer(&self.running_var_name()).expect("running var buffer");
        g.batch_norm(x, gamma, beta, (rm, rv), &self.name)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Folded inference form: one scale and one shift per element.
    pub fn cost(&self, elements: usize) -> Cost {
        Cost::new(self.num_params() as u64, 2 * elements as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, bias: bool) -> Self {
        Self { name: name.into(), in_features, out_features, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let bound = (1.0 / self.in_features as f64).sqrt();
        store.insert_param(
            self.weight_name(),
            uniform(rng, &[self.out_features, self.in_features], bound),
        );
        if self.bias {
            store.insert_param(self.bias_name(), Tensor::zeros(&[self.out_features]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = self.bias.then(|| g.param(store, &self.bias_name()));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + if self.bias { self.out_features } else { 0 }
    }

    /// Cost of applying the layer to `rows` input vectors.
    pub fn cost(&self, rows: usize) -> Cost {
        let outputs = (rows * self.out_features) as u64;
        let macs = outputs * self.in_features as u64;
        Cost::new(self.num_params() as u64, 2 * macs + if self.bias { outputs } else { 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self { name: name.into(), width }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert_param(format!("{}.gamma", self.name), Tensor::full(&[self.width], 1.0));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&[self.width]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, &format!("{}.gamma", self.name));
        let beta = g.param(store, &format!("{}.beta", self.name));
        g.layer_norm(x, gamma, beta)
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }

    pub fn cost(&self, elements: usize) -> Cost {
        Cost::new(self.num_params() as u64, 2 * elements as u64)
    }
}

/// Learnable table initialized from N(0, std²).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Embedding {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec() }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, std: f64) {
        let t = Tensor::from_fn(&self.shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        store.insert_param(self.name.clone(), t);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, &self.name)
    }

    pub fn num_params(&self) -> usize {
        self.shape.iter().product()
    }
}
