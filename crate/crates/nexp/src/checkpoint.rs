//! Architecture files and checkpoints.
//!
//! An architecture file is a single JSON document (`nexp.arch.v1`) listing
//! the input shape and the nodes in order, each with its layer
//! hyperparameters and input edges.
//!
//! A checkpoint is a directory holding `manifest.json`
//! (`nexp.checkpoint.v1`) plus one raw little-endian `f32` blob per
//! parameter and buffer tensor. The manifest carries the architecture, the
//! weight state, every tensor's shape and blob path, the capture point of
//! each conv and the config that produced it.

use std::fs;
use std::path::Path;

use nexp_core::engine::capture_points;
use nexp_core::graph::WeightState;
use nexp_core::layer::{BatchNorm2d, Conv2d, Linear, Pool};
use nexp_core::{Layer, Network, Node, Source, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ARCH_SCHEMA: &str = "nexp.arch.v1";
pub const CHECKPOINT_SCHEMA: &str = "nexp.checkpoint.v1";
pub const MANIFEST: &str = "manifest.json";

/// Layer hyperparameters without tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d { channels: usize, eps: f32, momentum: f32 },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { window: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { window: usize, stride: usize },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Flatten,
    Add,
}

impl LayerSpec {
    pub fn of(layer: &Layer) -> Self {
        match layer {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                bias: c.bias.is_some(),
            },
            Layer::BatchNorm2d(b) => LayerSpec::BatchNorm2d {
                channels: b.channels,
                eps: b.eps,
                momentum: b.momentum,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2d(p) => LayerSpec::MaxPool2d { window: p.window, stride: p.stride },
            Layer::AvgPool2d(p) => LayerSpec::AvgPool2d { window: p.window, stride: p.stride },
            Layer::Linear(l) => LayerSpec::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                bias: l.bias.is_some(),
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Add => LayerSpec::Add,
        }
    }

    /// The layer with zeroed parameters and default batch-norm statistics.
    pub fn build(&self) -> Layer {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => {
                let mut c = Conv2d::zeroed(in_channels, out_channels, 1, stride, padding, bias);
                c.kernel = kernel;
                c.weight = Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1]);
                Layer::Conv2d(c)
            }
            LayerSpec::BatchNorm2d { channels, eps, momentum } => {
                let mut b = BatchNorm2d::new(channels);
                b.eps = eps;
                b.momentum = momentum;
                Layer::BatchNorm2d(b)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d(Pool { window, stride }),
            LayerSpec::AvgPool2d { window, stride } => Layer::AvgPool2d(Pool { window, stride }),
            LayerSpec::Linear { in_features, out_features, bias } => {
                Layer::Linear(Linear::zeroed(in_features, out_features, bias))
            }
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Add => Layer::Add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<Source>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchFile {
    pub schema: String,
    pub input_shape: [usize; 3],
    pub nodes: Vec<NodeSpec>,
}

impl ArchFile {
    pub fn of(net: &Network) -> Self {
        Self {
            schema: ARCH_SCHEMA.into(),
            input_shape: net.input_shape,
            nodes: net
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    name: n.name.clone(),
                    layer: LayerSpec::of(&n.layer),
                    inputs: n.inputs.clone(),
                })
                .collect(),
        }
    }

    /// A validated network with zero parameters.
    pub fn build(&self) -> Result<Network> {
        if self.schema != ARCH_SCHEMA {
            return Err(Error::Format(format!("unsupported schema `{}`", self.schema)));
        }
        let net = Network {
            input_shape: self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node { name: n.name.clone(), layer: n.layer.build(), inputs: n.inputs.clone() })
                .collect(),
            state: WeightState::Init,
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn read_arch(path: &Path) -> Result<ArchFile> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

pub fn write_arch(path: &Path, arch: &ArchFile) -> Result<()> {
    write_json(path, arch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub node: usize,
    pub name: String,
    pub shape: Vec<usize>,
    /// Blob path relative to the checkpoint directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureEntry {
    pub conv: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub state: WeightState,
    pub arch: ArchFile,
    pub tensors: Vec<TensorEntry>,
    pub capture_points: Vec<CaptureEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn tensor_slots(layer: &mut Layer) -> Vec<(&'static str, &mut Tensor)> {
    match layer {
        Layer::Conv2d(c) => {
            let mut v = vec![("weight", &mut c.weight)];
            v.extend(c.bias.as_mut().map(|b| ("bias", b)));
            v
        }
        Layer::BatchNorm2d(b) => vec![
            ("gamma", &mut b.gamma),
            ("beta", &mut b.beta),
            ("running_mean", &mut b.running_mean),
            ("running_var", &mut b.running_var),
        ],
        Layer::Linear(l) => {
            let mut v = vec![("weight", &mut l.weight)];
            v.extend(l.bias.as_mut().map(|b| ("bias", b)));
            v
        }
        _ => vec![],
    }
}

fn tensors_of(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
    let names = layer.param_names().iter().chain(layer.buffer_names()).copied();
    names.zip(layer.params().into_iter().chain(layer.buffers())).collect()
}

/// Writes `net` to the directory `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, net: &Network, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tensors = Vec::new();
    for (i, node) in net.nodes.iter().enumerate() {
        for (name, t) in tensors_of(&node.layer) {
            let file = format!("n{i:03}.{name}.bin");
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(Error::io(&path))?;
            tensors.push(TensorEntry { node: i, name: name.into(), shape: t.shape().to_vec(), file });
        }
    }
    let captures = capture_points(net)
        .into_iter()
        .map(|c| CaptureEntry {
            conv: net.nodes[c.conv].name.clone(),
            node: net.nodes[c.node].name.clone(),
        })
        .collect();
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA.into(),
        state: net.state,
        arch: ArchFile::of(net),
        tensors,
        capture_points: captures,
        config: config.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    if m.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Format(format!("{}: unsupported schema `{}`", path.display(), m.schema)));
    }
    Ok(m)
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let m = read_manifest(dir)?;
    let mut net = m.arch.build()?;
    net.state = m.state;
    let mut filled = 0usize;
    for (i, node) in net.nodes.iter_mut().enumerate() {
        let node_name = node.name.clone();
        for (name, slot) in tensor_slots(&mut node.layer) {
            let entry = m
                .tensors
                .iter()
                .find(|e| e.node == i && e.name == name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}` of node `{node_name}`")))?;
            if entry.shape != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` of node `{node_name}`: shape {:?}, expected {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            let data = read_f32_blob(&dir.join(&entry.file))?;
            *slot = Tensor::new(entry.shape.clone(), data)
                .map_err(|_| Error::Format(format!("blob `{}` has the wrong length", entry.file)))?;
            filled += 1;
        }
    }
    if filled != m.tensors.len() {
        return Err(Error::Format(format!("manifest lists {} tensors, network has {filled}", m.tensors.len())));
    }
    net.validate()?;
    Ok(net)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}
