//! Layer kinds and their learnable parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel extents (rows, cols).
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `(out_channels, in_channels, rows, cols)`.
    pub weight: Tensor,
    /// `(out_channels)`.
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn zeroed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (m, n) = self.kernel;
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < m || wp < n || self.stride == 0 {
            return None;
        }
        Some(((hp - m) / self.stride + 1, (wp - n) / self.stride + 1))
    }

    /// Values in one input-channel slice of one filter.
    pub fn kernel_area(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn zeroed(in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            in_features,
            out_features,
            weight: Tensor::zeros(&[out_features, in_features]),
            bias: bias.then(|| Tensor::zeros(&[out_features])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

impl Pool {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.window || w < self.window || self.stride == 0 {
            return None;
        }
        Some((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d(Pool),
    AvgPool2d(Pool),
    Linear(Linear),
    Flatten,
    /// Elementwise sum of two or more identically shaped operands.
    Add,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Linear(_) => "linear",
            Layer::Flatten => "flatten",
            Layer::Add => "residual_add",
        }
    }

    /// Learnable parameter tensors in a fixed order.
    pub fn params(&self) -> alloc::vec::Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => {
                let mut v = vec![&c.weight];
                v.extend(c.bias.as_ref());
                v
            }
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            Layer::Linear(l) => {
                let mut v = vec![&l.weight];
                v.extend(l.bias.as_ref());
                v
            }
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> alloc::vec::Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => {
                let mut v = vec![&mut c.weight];
                v.extend(c.bias.as_mut());
                v
            }
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Linear(l) => {
                let mut v = vec![&mut l.weight];
                v.extend(l.bias.as_mut());
                v
            }
            _ => vec![],
        }
    }

    /// Names matching [`Layer::params`], used in checkpoint manifests.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Conv2d(c) if c.bias.is_some() => &["weight", "bias"],
            Layer::Conv2d(_) => &["weight"],
            Layer::BatchNorm2d(_) => &["gamma", "beta"],
            Layer::Linear(l) if l.bias.is_some() => &["weight", "bias"],
            Layer::Linear(_) => &["weight"],
            _ => &[],
        }
    }

    /// Non-learnable state tensors (batch-norm running statistics).
    pub fn buffers(&self) -> alloc::vec::Vec<&Tensor> {
        match self {
            Layer::BatchNorm2d(b) => vec![&b.running_mean, &b.running_var],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> alloc::vec::Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm2d(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => vec![],
        }
    }

    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self {
            Layer::BatchNorm2d(_) => &["running_mean", "running_var"],
            _ => &[],
        }
    }

    /// Checks that parameter tensor shapes agree with the declared extents.
    pub fn check_params(&self, name: &str) -> Result<()> {
        let bad = |what: String| Err(Error::Shape(format!("layer `{name}`: {what}")));
        match self {
            Layer::Conv2d(c) => {
                let want = [c.out_channels, c.in_channels, c.kernel.0, c.kernel.1];
                if c.weight.shape() != want {
                    return bad(format!("weight {:?}, expected {want:?}", c.weight.shape()));
                }
                if let Some(b) = &c.bias {
                    if b.shape() != [c.out_channels] {
                        return bad(format!("bias {:?}", b.shape()));
                    }
                }
            }
            Layer::BatchNorm2d(b) => {
                for t in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                    if t.shape() != [b.channels] {
                        return bad(format!("batch-norm vector {:?}", t.shape()));
                    }
                }
            }
            Layer::Linear(l) => {
                if l.weight.shape() != [l.out_features, l.in_features] {
                    return bad(format!("weight {:?}", l.weight.shape()));
                }
                if let Some(b) = &l.bias {
                    if b.shape() != [l.out_features] {
                        return bad(format!("bias {:?}", b.shape()));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}
