//! Parameterized layers with cached activations for backpropagation.
//!
//! Every layer follows the same protocol: `forward(x, Mode::Train)` stores
//! what its backward pass needs, and a single `backward(grad)` consumes it,
//! accumulates parameter gradients, and returns the input gradient.
//! `Mode::Eval` caches nothing and uses batch-norm running statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor owned by a layer, with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running statistics are checkpointed but never optimized.
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn accumulate(&mut self, g: &[T]) {
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Joins a parameter path prefix and a child name with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Walks named parameters in a fixed order.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                total += p.value.numel()
            }
        });
        total
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!(
        "{layer}: backward called without a training-mode forward"
    ))
}

/// Convolution layer with He-normal initialization.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
    /// Skip forming the input gradient (first layer of a network).
    pub input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        let fan_in = (cin * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * kh * kw)
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        let weight = Tensor::from_vec(&[cout, cin, kh, kw], data).expect("sized");
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            geometry,
            input_grad: true,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            &self.geometry,
        )?;
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    /// Returns the input gradient, or an empty tensor when `input_grad` is off.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv"))?;
        let g = ops::conv2d_backward(
            &x,
            &self.weight.value,
            grad,
            &self.geometry,
            self.input_grad,
        )?;
        self.weight.accumulate(g.weight.data());
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(g.bias.data());
        }
        Ok(g.input.unwrap_or_else(|| Tensor::zeros(&[0])))
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization with running statistics (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(Tensor::full(&[channels], T::one())),
            bias: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let eps = T::lit(self.eps);
        match mode {
            Mode::Eval => {
                let (y, _) = ops::batch_norm_apply(
                    x,
                    self.running_mean.value.data(),
                    self.running_var.value.data(),
                    self.weight.value.data(),
                    self.bias.value.data(),
                    eps,
                )?;
                Ok(y)
            }
            Mode::Train => {
                let (n, _, h, w) = x.try_dims4()?;
                let (mean, var) = ops::channel_stats(x);
                let (y, cache) = ops::batch_norm_apply(
                    x,
                    &mean,
                    &var,
                    self.weight.value.data(),
                    self.bias.value.data(),
                    eps,
                )?;
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                for (r, &v) in self.running_mean.value.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * v;
                }
                for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * v * T::lit(unbias);
                }
                self.cache = Some(cache);
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| missing_cache("batch norm"))?;
        let (gx, dgamma, dbeta) = ops::batch_norm_backward(grad, &cache, self.weight.value.data());
        self.weight.accumulate(&dgamma);
        self.bias.accumulate(&dbeta);
        Ok(gx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Pre-activation unit: batch-norm, rectifier, then convolution.
///
/// In linear mode the normalization and rectifier are dropped and the unit
/// is a bare convolution.
#[derive(Clone, Debug)]
pub struct PreActConv<T> {
    pub bn: Option<BatchNorm2d<T>>,
    pub conv: Conv2d<T>,
    relu_out: Option<Tensor<T>>,
}

impl<T: Real> PreActConv<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
        bias: bool,
        linear: bool,
        rng: &mut R,
    ) -> Self {
        PreActConv {
            bn: (!linear).then(|| BatchNorm2d::new(cin)),
            conv: Conv2d::new(cin, cout, geometry, bias, rng),
            relu_out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self.bn.as_mut() {
            None => self.conv.forward(x, mode),
            Some(bn) => {
                let a = ops::relu(&bn.forward(x, mode)?);
                let y = self.conv.forward(&a, mode)?;
                if mode == Mode::Train {
                    self.relu_out = Some(a);
                }
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.conv.backward(grad)?;
        match self.bn.as_mut() {
            None => Ok(g),
            Some(bn) => {
                let a = self
                    .relu_out
                    .take()
                    .ok_or_else(|| missing_cache("pre-activation"))?;
                bn.backward(&ops::relu_backward(&g, &a))
            }
        }
    }
}

impl<T: Real> Module<T> for PreActConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// Post-activation unit: convolution, batch-norm, optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
    out: Option<Tensor<T>>,
}

impl<T: Real> ConvBn<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, geometry, false, rng),
            bn: BatchNorm2d::new(cout),
            relu,
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x, mode)?, mode)?;
        if !self.relu {
            return Ok(y);
        }
        let y = ops::relu(&y);
        if mode == Mode::Train {
            self.out = Some(y.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = if self.relu {
            let y = self.out.take().ok_or_else(|| missing_cache("conv-bn"))?;
            ops::relu_backward(grad, &y)
        } else {
            grad.clone()
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
