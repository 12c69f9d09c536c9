//! FLOPs and parameter accounting.
//!
//! FLOPs are counted as multiply–accumulate pairs (one multiply plus one add
//! is one unit). Per-sample contributions:
//!
//! | layer        | count                                   |
//! |--------------|-----------------------------------------|
//! | conv2d       | `out_c · in_c · m · n · H_out · W_out`  |
//! | linear       | `out_f · in_f`                          |
//! | batchnorm2d  | one per output element                  |
//! | relu         | one per output element                  |
//! | max/avg pool | `window²` per output element            |
//! | residual add | `operands − 1` per output element       |
//! | flatten      | zero                                    |
//!
//! Biases are not counted. [`FlopConvention::Flops`] doubles every count.

use serde::{Deserialize, Serialize};

use crate::graph::{ActShape, Network, Source};
use crate::layer::Layer;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    #[default]
    Macs,
    Flops,
}

/// Per-node MAC counts.
pub fn flops_per_node(net: &Network) -> Result<alloc::vec::Vec<u64>> {
    let shapes = net.shapes()?;
    Ok(net
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let out = shapes[i];
            let elems = out.numel() as u64;
            match &node.layer {
                Layer::Conv2d(c) => {
                    let (ho, wo) = match out {
                        ActShape::Map { h, w, .. } => (h, w),
                        ActShape::Flat(_) => (1, 1),
                    };
                    (c.out_channels * c.in_channels * c.kernel_area() * ho * wo) as u64
                }
                Layer::Linear(l) => (l.out_features * l.in_features) as u64,
                Layer::BatchNorm2d(_) | Layer::Relu => elems,
                Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => (p.window * p.window) as u64 * elems,
                Layer::Add => (node.inputs.len() as u64 - 1) * elems,
                Layer::Flatten => 0,
            }
        })
        .collect())
}

pub fn count_flops(net: &Network, convention: FlopConvention) -> Result<u64> {
    let macs: u64 = flops_per_node(net)?.iter().sum();
    Ok(match convention {
        FlopConvention::Macs => macs,
        FlopConvention::Flops => 2 * macs,
    })
}

/// Learnable parameters (weights, biases, batch-norm scale and shift).
pub fn count_params(net: &Network) -> u64 {
    net.nodes
        .iter()
        .flat_map(|n| n.layer.params())
        .map(|t| t.len() as u64)
        .sum()
}

/// Non-learnable state (batch-norm running statistics).
pub fn count_buffers(net: &Network) -> u64 {
    net.nodes
        .iter()
        .flat_map(|n| n.layer.buffers())
        .map(|t| t.len() as u64)
        .sum()
}

/// Sizes of a compressed network relative to its original.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub flops_original: u64,
    pub flops_current: u64,
    pub params_original: u64,
    pub params_current: u64,
    /// original / current
    pub ratio_flops: f64,
    pub ratio_params: f64,
    /// MACs size percentage: current / original × 100
    pub msp: f64,
    /// Parameter size percentage: current / original × 100
    pub psp: f64,
}

impl CompressionReport {
    pub fn from_counts(flops: (u64, u64), params: (u64, u64)) -> Self {
        let (fo, fc) = flops;
        let (po, pc) = params;
        Self {
            flops_original: fo,
            flops_current: fc,
            params_original: po,
            params_current: pc,
            ratio_flops: fo as f64 / fc as f64,
            ratio_params: po as f64 / pc as f64,
            msp: fc as f64 * 100.0 / fo as f64,
            psp: pc as f64 * 100.0 / po as f64,
        }
    }

    /// Recovers the current MAC count from `msp`.
    pub fn flops_from_msp(&self) -> u64 {
        libm::round(self.msp * self.flops_original as f64 / 100.0) as u64
    }
}

pub fn compression_report(original: &Network, current: &Network) -> Result<CompressionReport> {
    Ok(CompressionReport::from_counts(
        (
            count_flops(original, FlopConvention::Macs)?,
            count_flops(current, FlopConvention::Macs)?,
        ),
        (count_params(original), count_params(current)),
    ))
}

/// Output shape of a node's first input (used by the coupling analysis).
pub(crate) fn input_shape_of(net: &Network, shapes: &[ActShape], node: usize) -> ActShape {
    match net.nodes[node].inputs[0] {
        Source::Input => net.input_act_shape(),
        Source::Node(j) => shapes[j],
    }
}
