//! Built-in toy architectures and weight initialization.

use alloc::vec;
use serde::{Deserialize, Serialize};

use crate::graph::{Builder, Network, Source, WeightState};
use crate::layer::Layer;
use crate::rng::{normal, seeded};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Three conv stages with max-pooling.
    PlainCnn,
    /// Three stages of two convs each.
    Vgg,
    /// Stem plus three residual blocks; the second downsamples through a
    /// projected shortcut.
    Resnet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::PlainCnn, Arch::Vgg, Arch::Resnet];

    pub fn name(self) -> &'static str {
        match self {
            Arch::PlainCnn => "plain-cnn",
            Arch::Vgg => "vgg",
            Arch::Resnet => "resnet",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Builds `arch` with all-zero parameters. Spatial extents must be
/// divisible by 4.
pub fn build(arch: Arch, input_shape: [usize; 3], classes: usize) -> Result<Network> {
    let [c, h, w] = input_shape;
    let mut b = Builder::new(input_shape);
    match arch {
        Arch::PlainCnn => {
            let x = b.conv_bn_relu(Source::Input, c, 16, 1);
            let x = b.max_pool(x, 2, 2);
            let x = b.conv_bn_relu(x, 16, 32, 1);
            let x = b.max_pool(x, 2, 2);
            let x = b.conv_bn_relu(x, 32, 64, 1);
            let x = b.avg_pool(x, h / 4, h / 4);
            let x = b.flatten(x);
            b.linear(x, 64, classes);
        }
        Arch::Vgg => {
            let x = b.conv_bn_relu(Source::Input, c, 16, 1);
            let x = b.conv_bn_relu(x, 16, 16, 1);
            let x = b.max_pool(x, 2, 2);
            let x = b.conv_bn_relu(x, 16, 32, 1);
            let x = b.conv_bn_relu(x, 32, 32, 1);
            let x = b.max_pool(x, 2, 2);
            let x = b.conv_bn_relu(x, 32, 64, 1);
            let x = b.conv_bn_relu(x, 64, 64, 1);
            let x = b.avg_pool(x, h / 4, h / 4);
            let x = b.flatten(x);
            b.linear(x, 64, classes);
        }
        Arch::Resnet => {
            let stem = b.conv_bn_relu(Source::Input, c, 16, 1);
            // block 1: identity shortcut
            let y = b.conv_bn_relu(stem, 16, 16, 1);
            let y = b.conv(y, 16, 16, 3, 1, 1);
            let y = b.bn(y, 16);
            let s = b.add(vec![y, stem]);
            let x1 = b.relu(s);
            // block 2: stride-2, projected shortcut
            let y = b.conv_bn_relu(x1, 16, 32, 2);
            let y = b.conv(y, 32, 32, 3, 1, 1);
            let y = b.bn(y, 32);
            let p = b.conv(x1, 16, 32, 1, 2, 0);
            let p = b.bn(p, 32);
            let s = b.add(vec![y, p]);
            let x2 = b.relu(s);
            // block 3: identity shortcut
            let y = b.conv_bn_relu(x2, 32, 32, 1);
            let y = b.conv(y, 32, 32, 3, 1, 1);
            let y = b.bn(y, 32);
            let s = b.add(vec![y, x2]);
            let x3 = b.relu(s);
            let x = b.avg_pool(x3, h / 2, w / 2);
            let x = b.flatten(x);
            b.linear(x, 32, classes);
        }
    }
    b.finish()
}

/// He-normal conv and linear weights, zero biases, unit batch-norm scale.
pub fn init_weights(net: &mut Network, seed: u64) {
    let mut rng = seeded(seed);
    for node in &mut net.nodes {
        match &mut node.layer {
            Layer::Conv2d(c) => {
                let fan_in = (c.in_channels * c.kernel_area()) as f32;
                let std = libm::sqrtf(2.0 / fan_in);
                for v in c.weight.data_mut() {
                    *v = normal(&mut rng) * std;
                }
                if let Some(b) = &mut c.bias {
                    b.data_mut().fill(0.0);
                }
            }
            Layer::Linear(l) => {
                let std = libm::sqrtf(1.0 / l.in_features as f32);
                for v in l.weight.data_mut() {
                    *v = normal(&mut rng) * std;
                }
                if let Some(b) = &mut l.bias {
                    b.data_mut().fill(0.0);
                }
            }
            Layer::BatchNorm2d(bn) => {
                bn.gamma.data_mut().fill(1.0);
                bn.beta.data_mut().fill(0.0);
                bn.running_mean.data_mut().fill(0.0);
                bn.running_var.data_mut().fill(1.0);
            }
            _ => {}
        }
    }
    net.state = WeightState::Init;
}

pub fn build_initialized(
    arch: Arch,
    input_shape: [usize; 3],
    classes: usize,
    seed: u64,
) -> Result<Network> {
    let mut net = build(arch, input_shape, classes)?;
    init_weights(&mut net, seed);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_architectures_validate() {
        for arch in Arch::ALL {
            let net = build_initialized(arch, [3, 8, 8], 4, 1).unwrap();
            assert_eq!(net.num_classes(), 4);
            assert_eq!(Arch::from_name(arch.name()), Some(arch));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = build_initialized(Arch::Vgg, [3, 8, 8], 4, 5).unwrap();
        let b = build_initialized(Arch::Vgg, [3, 8, 8], 4, 5).unwrap();
        let c = build_initialized(Arch::Vgg, [3, 8, 8], 4, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
