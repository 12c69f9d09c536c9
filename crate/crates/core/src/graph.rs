//! The network as an ordered, acyclic layer graph.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::layer::{BatchNorm2d, Conv2d, Layer, Linear, Pool};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<Source>,
}

/// Whether the weights are freshly initialized or have been trained.
///
/// Batch-norm layers of an untrained network have no meaningful running
/// statistics, so inference on them uses batch statistics instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightState {
    #[default]
    Init,
    Trained,
}

/// Per-sample activation shape at a node output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { c, .. } => c,
            ActShape::Flat(f) => f,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![c, h, w],
            ActShape::Flat(f) => vec![f],
        }
    }
}

/// Nodes are stored in topological order: every input refers to an earlier
/// node or to the network input. The last node is the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// `(channels, height, width)` of one input sample.
    pub input_shape: [usize; 3],
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub state: WeightState,
}

impl Network {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            nodes: Vec::new(),
            state: WeightState::Init,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer, inputs: Vec<Source>) -> Source {
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs,
        });
        Source::Node(self.nodes.len() - 1)
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn input_act_shape(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        ActShape::Map { c, h, w }
    }

    pub fn conv_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.layer, Layer::Conv2d(_)))
            .map(|(i, _)| i)
    }

    /// For every node, the nodes that read its output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for src in &node.inputs {
                if let Source::Node(j) = *src {
                    if j < out.len() && !out[j].contains(&i) {
                        out[j].push(i);
                    }
                }
            }
        }
        out
    }

    /// Validates structure and infers the per-sample output shape of every node.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidGraph("network has no layers".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidGraph("input shape has a zero extent".into()));
        }
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            node.layer.check_params(&node.name)?;
            let mut ins = Vec::with_capacity(node.inputs.len());
            for src in &node.inputs {
                ins.push(match *src {
                    Source::Input => self.input_act_shape(),
                    Source::Node(j) if j < i => shapes[j],
                    Source::Node(j) => {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}` reads node {j}, which is not earlier in the order",
                            node.name
                        )))
                    }
                });
            }
            let arity_ok = match node.layer {
                Layer::Add => ins.len() >= 2,
                _ => ins.len() == 1,
            };
            if !arity_ok {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` ({}) has {} inputs",
                    node.name,
                    node.layer.kind_name(),
                    ins.len()
                )));
            }
            shapes.push(infer(&node.name, &node.layer, &ins)?);
        }

        // single sink: every node but the last must feed something
        let consumers = self.consumers();
        for (i, c) in consumers.iter().enumerate() {
            if c.is_empty() && i != self.output_node() {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` has no consumers; only the classifier head may be an output",
                    self.nodes[i].name
                )));
            }
        }
        if !matches!(self.nodes[self.output_node()].layer, Layer::Linear(_)) {
            return Err(Error::InvalidGraph(
                "the last node must be the linear classifier head".into(),
            ));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn num_classes(&self) -> usize {
        match &self.nodes[self.output_node()].layer {
            Layer::Linear(l) => l.out_features,
            _ => 0,
        }
    }
}

fn infer(name: &str, layer: &Layer, ins: &[ActShape]) -> Result<ActShape> {
    let need_map = |s: ActShape| match s {
        ActShape::Map { c, h, w } => Ok((c, h, w)),
        ActShape::Flat(_) => Err(Error::Shape(format!(
            "layer `{name}` expects a feature map input"
        ))),
    };
    Ok(match layer {
        Layer::Conv2d(conv) => {
            let (c, h, w) = need_map(ins[0])?;
            if c != conv.in_channels {
                return Err(Error::Shape(format!(
                    "conv `{name}` expects {} input channels, producer gives {c}",
                    conv.in_channels
                )));
            }
            let (ho, wo) = conv.output_hw(h, w).ok_or_else(|| {
                Error::Shape(format!("conv `{name}` kernel does not fit a {h}x{w} input"))
            })?;
            ActShape::Map {
                c: conv.out_channels,
                h: ho,
                w: wo,
            }
        }
        Layer::BatchNorm2d(bn) => {
            let (c, h, w) = need_map(ins[0])?;
            if c != bn.channels {
                return Err(Error::Shape(format!(
                    "batch-norm `{name}` has {} channels, producer gives {c}",
                    bn.channels
                )));
            }
            ActShape::Map { c, h, w }
        }
        Layer::Relu => ins[0],
        Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
            let (c, h, w) = need_map(ins[0])?;
            let (ho, wo) = p.output_hw(h, w).ok_or_else(|| {
                Error::Shape(format!("pool `{name}` window does not fit a {h}x{w} input"))
            })?;
            ActShape::Map { c, h: ho, w: wo }
        }
        Layer::Flatten => ActShape::Flat(ins[0].numel()),
        Layer::Linear(l) => {
            let f = match ins[0] {
                ActShape::Flat(f) => f,
                ActShape::Map { .. } => {
                    return Err(Error::Shape(format!(
                        "linear `{name}` needs a flattened input"
                    )))
                }
            };
            if f != l.in_features {
                return Err(Error::Shape(format!(
                    "linear `{name}` expects {} features, producer gives {f}",
                    l.in_features
                )));
            }
            ActShape::Flat(l.out_features)
        }
        Layer::Add => {
            let first = ins[0];
            for other in &ins[1..] {
                if *other != first {
                    if let (ActShape::Map { c: a, .. }, ActShape::Map { c: b, .. }) = (first, *other)
                    {
                        if a != b {
                            return Err(Error::ResidualMismatch {
                                node: name.into(),
                                left: a,
                                right: b,
                            });
                        }
                    }
                    return Err(Error::Shape(format!(
                        "residual add `{name}` operands differ: {first:?} vs {other:?}"
                    )));
                }
            }
            first
        }
    })
}

/// Convenience builder used by the built-in architectures and tests.
pub struct Builder {
    net: Network,
}

impl Builder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            net: Network::new(input_shape),
        }
    }

    fn next_name(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.net.nodes.len())
    }

    pub fn conv(
        &mut self,
        x: Source,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Source {
        let name = self.next_name("conv");
        let conv = Conv2d::zeroed(in_c, out_c, kernel, stride, padding, true);
        self.net.push(name, Layer::Conv2d(conv), vec![x])
    }

    pub fn bn(&mut self, x: Source, c: usize) -> Source {
        let name = self.next_name("bn");
        self.net
            .push(name, Layer::BatchNorm2d(BatchNorm2d::new(c)), vec![x])
    }

    pub fn relu(&mut self, x: Source) -> Source {
        let name = self.next_name("relu");
        self.net.push(name, Layer::Relu, vec![x])
    }

    pub fn max_pool(&mut self, x: Source, window: usize, stride: usize) -> Source {
        let name = self.next_name("maxpool");
        self.net
            .push(name, Layer::MaxPool2d(Pool { window, stride }), vec![x])
    }

    pub fn avg_pool(&mut self, x: Source, window: usize, stride: usize) -> Source {
        let name = self.next_name("avgpool");
        self.net
            .push(name, Layer::AvgPool2d(Pool { window, stride }), vec![x])
    }

    pub fn flatten(&mut self, x: Source) -> Source {
        let name = self.next_name("flatten");
        self.net.push(name, Layer::Flatten, vec![x])
    }

    pub fn linear(&mut self, x: Source, in_f: usize, out_f: usize) -> Source {
        let name = self.next_name("fc");
        self.net
            .push(name, Layer::Linear(Linear::zeroed(in_f, out_f, true)), vec![x])
    }

    pub fn add(&mut self, xs: Vec<Source>) -> Source {
        let name = self.next_name("add");
        self.net.push(name, Layer::Add, xs)
    }

    /// conv → batch-norm → relu
    pub fn conv_bn_relu(&mut self, x: Source, in_c: usize, out_c: usize, stride: usize) -> Source {
        let c = self.conv(x, in_c, out_c, 3, stride, 1);
        let b = self.bn(c, out_c);
        self.relu(b)
    }

    pub fn finish(self) -> Result<Network> {
        self.net.validate()?;
        Ok(self.net)
    }

    pub fn finish_unchecked(self) -> Network {
        self.net
    }
}
