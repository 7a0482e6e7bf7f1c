//! Parameterized layers built on the tape ops.

use ndarray::ArrayD;
use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Real, Var};

/// `U(-bound, bound)` initialization.
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(shape.to_vec())
}

pub fn full<T: Real>(shape: &[usize], value: f64) -> ArrayD<T> {
    ArrayD::from_elem(shape.to_vec(), T::lit(value))
}

/// Fully connected layer over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// PyTorch-style default init: `U(±1/√in)` for weight and bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(&[out_dim], bound, rng)));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Weight and bias set explicitly (used for zero / identity style inits).
    pub fn with_values<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: ArrayD<T>,
        bias: Option<ArrayD<T>>,
    ) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Dense square-kernel convolution in NHWC layout.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub ksize: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        ksize: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ksize * ksize * in_channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[fan_in, out_channels], bound, rng));
        let bias = Some(store.add(format!("{name}.bias"), uniform(&[out_channels], bound, rng)));
        Self { weight, bias, in_channels, out_channels, ksize, stride }
    }

    /// Same as [`Conv2d::new`] with weights drawn from `U(±gain/√fan_in)` and a
    /// zero bias.
    pub fn scaled<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        ksize: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ksize * ksize * in_channels;
        let bound = gain / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[fan_in, out_channels], bound, rng));
        let bias = Some(store.add(format!("{name}.bias"), zeros(&[out_channels])));
        Self { weight, bias, in_channels, out_channels, ksize, stride: 1 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.ksize, self.stride)
    }

    pub fn num_params(&self) -> usize {
        self.ksize * self.ksize * self.in_channels * self.out_channels
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

/// Depthwise convolution (one filter per channel), stride 1.
#[derive(Clone, Debug)]
pub struct DwConv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
    pub ksize: usize,
}

impl DwConv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((ksize * ksize) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[ksize * ksize, channels], bound, rng));
        let bias = Some(store.add(format!("{name}.bias"), uniform(&[channels], bound, rng)));
        Self { weight, bias, channels, ksize }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.dwconv2d(x, w, b, self.ksize)
    }
}

/// Layer normalization with a learned per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), zeros(&[channels]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_last(n, gamma);
        g.add_last(y, beta)
    }
}
