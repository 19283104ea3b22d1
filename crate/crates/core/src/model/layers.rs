use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mode, Session};
use crate::error::Result;
use crate::tensor::{Real, Tensor, Var};

/// A named learnable tensor.
#[derive(Debug, Clone)]
pub struct Param<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether L2 weight decay applies (conv / linear / graph weights).
    pub decay: bool,
    pub(crate) slot: usize,
}

impl<T: Real> Param<T> {
    pub(crate) fn new(name: String, tensor: Tensor<T>, decay: bool, slot: usize) -> Self {
        Param {
            name,
            tensor: tensor.with_grad(),
            decay,
            slot,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Hands out parameter and normalization slots in build order.
#[derive(Debug, Default, Clone)]
pub(crate) struct Slots {
    pub params: usize,
    pub norms: usize,
}

impl Slots {
    pub fn param(&mut self) -> usize {
        self.params += 1;
        self.params - 1
    }

    pub fn norm(&mut self) -> usize {
        self.norms += 1;
        self.norms - 1
    }
}

pub(crate) fn normal_tensor<T: Real>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let numel = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..numel).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Bias-free square-kernel convolution.
#[derive(Debug, Clone)]
pub struct Conv2d<T = f32> {
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    /// He-normal (fan-out) initialized convolution; `pad = kernel / 2`.
    pub(crate) fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        slots: &mut Slots,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_out = out_channels * kernel * kernel;
        let w = normal_tensor(
            vec![out_channels, in_channels, kernel, kernel],
            (2.0 / fan_out as f64).sqrt(),
            rng,
        );
        Conv2d {
            weight: Param::new(format!("{name}.weight"), w, true, slots.param()),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.bind(&self.weight);
        s.graph.conv2d(x, w, self.stride, self.pad)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub(crate) name: String,
    pub(crate) slot: usize,
}

impl<T: Real> BatchNorm2d<T> {
    pub(crate) fn new(name: &str, channels: usize, slots: &mut Slots) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor::full(vec![channels], T::one()),
                false,
                slots.param(),
            ),
            beta: Param::new(
                format!("{name}.beta"),
                Tensor::zeros(vec![channels]),
                false,
                slots.param(),
            ),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
            name: name.to_string(),
            slot: slots.norm(),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.bind(&self.gamma);
        let b = s.bind(&self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, g, b, self.eps)?;
                s.norm_updates.push((self.slot, stats));
                Ok(y)
            }
            Mode::Infer => s
                .graph
                .batch_norm_infer(x, g, b, &self.running_mean, &self.running_var, self.eps),
        }
    }

    /// Folds one batch's statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub fn update_running(&mut self, stats: &crate::tensor::BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let n = stats.count;
        let unbias = if n > 1 {
            T::from_usize_lossy(n) / T::from_usize_lossy(n - 1)
        } else {
            T::one()
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub(crate) fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        weight_std: f64,
        slots: &mut Slots,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                normal_tensor(vec![out_features, in_features], weight_std, rng),
                true,
                slots.param(),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(vec![out_features]),
                false,
                slots.param(),
            ),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.bind(&self.weight);
        let b = s.bind(&self.bias);
        s.graph.linear(x, w, Some(b))
    }
}
