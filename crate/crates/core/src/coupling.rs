//! Structural coupling and channel removal.
//!
//! A *channel space* is a set of node outputs that must always have the same
//! channel count: a conv's output together with every batch-norm, relu,
//! pooling and flatten that passes it through, merged across residual adds.
//! Removing channel `c` of a space removes the matching output filter of
//! every conv producing into it, the matching batch-norm entries, and the
//! matching input slice of every conv or linear layer reading from it. That
//! set of slices is a [`CouplingGroup`].
//!
//! Spaces that contain the network input or a linear output (the classifier
//! head) are never prunable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::graph::{ActShape, Network, Source};
use crate::layer::Layer;
use crate::profile::input_shape_of;
use crate::{Error, Result, Tensor};

/// A conv filter, named by node index and output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterId {
    pub layer: usize,
    pub filter: usize,
}

impl FilterId {
    pub fn new(layer: usize, filter: usize) -> Self {
        Self { layer, filter }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    OutChannels,
    InChannels,
    BnChannels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub layer: usize,
    pub axis: Axis,
    /// Index range along `axis` (a block of features for linear inputs
    /// behind a flatten).
    pub channels: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    /// Lowest-indexed producing conv and the channel index.
    pub anchor: FilterId,
    pub members: Vec<Member>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpace {
    pub channels: usize,
    /// Conv nodes writing into the space, ascending.
    pub producers: Vec<usize>,
    pub norms: Vec<usize>,
    /// `(node, block)`: readers and the number of input indices per channel.
    pub consumers: Vec<(usize, usize)>,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceMap {
    pub spaces: Vec<ChannelSpace>,
    /// For each node output: `(space, block)`.
    pub node_space: Vec<(usize, usize)>,
}

impl SpaceMap {
    /// Space produced by conv `layer`, if it is prunable.
    pub fn prunable_space_of(&self, layer: usize) -> Option<usize> {
        let (s, _) = *self.node_space.get(layer)?;
        let sp = &self.spaces[s];
        (sp.prunable && sp.producers.contains(&layer)).then_some(s)
    }

    /// Anchor conv of a space.
    pub fn anchor(&self, space: usize) -> Option<usize> {
        self.spaces[space].producers.first().copied()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn channel_spaces(net: &Network) -> Result<SpaceMap> {
    let shapes = net.shapes()?;
    // raw space 0 is the network input; every conv or linear opens a new one
    let mut parent = vec![0usize];
    let mut raw_of: Vec<(usize, usize)> = Vec::with_capacity(net.nodes.len());
    let mut linear_raw = Vec::new();
    let src_raw = |raw_of: &[(usize, usize)], s: Source| match s {
        Source::Input => (0usize, 1usize),
        Source::Node(j) => raw_of[j],
    };
    for (i, node) in net.nodes.iter().enumerate() {
        let entry = match &node.layer {
            Layer::Conv2d(_) | Layer::Linear(_) => {
                parent.push(parent.len());
                let id = parent.len() - 1;
                if matches!(node.layer, Layer::Linear(_)) {
                    linear_raw.push(id);
                }
                (id, 1)
            }
            Layer::Flatten => {
                let (r, b) = src_raw(&raw_of, node.inputs[0]);
                let hw = match input_shape_of(net, &shapes, i) {
                    ActShape::Map { h, w, .. } => h * w,
                    ActShape::Flat(_) => 1,
                };
                (r, b * hw)
            }
            Layer::Add => {
                let (first, b) = src_raw(&raw_of, node.inputs[0]);
                for s in &node.inputs[1..] {
                    let (r, _) = src_raw(&raw_of, *s);
                    let (a, c) = (find(&mut parent, first), find(&mut parent, r));
                    if a != c {
                        parent[c.max(a)] = c.min(a);
                    }
                }
                (first, b)
            }
            _ => src_raw(&raw_of, node.inputs[0]),
        };
        raw_of.push(entry);
    }

    // compact roots into space ids in order of first appearance
    let mut root_to_space = BTreeMap::new();
    let mut spaces: Vec<ChannelSpace> = Vec::new();
    let mut space_of_root = |root: usize, spaces: &mut Vec<ChannelSpace>| -> usize {
        *root_to_space.entry(root).or_insert_with(|| {
            spaces.push(ChannelSpace {
                channels: 0,
                producers: Vec::new(),
                norms: Vec::new(),
                consumers: Vec::new(),
                prunable: true,
            });
            spaces.len() - 1
        })
    };
    let input_root = find(&mut parent, 0);
    let input_space = space_of_root(input_root, &mut spaces);
    spaces[input_space].channels = net.input_shape[0];
    spaces[input_space].prunable = false;
    let mut node_space = Vec::with_capacity(net.nodes.len());
    for (i, &(raw, block)) in raw_of.iter().enumerate() {
        let root = find(&mut parent, raw);
        let s = space_of_root(root, &mut spaces);
        node_space.push((s, block));
        spaces[s].channels = shapes[i].channels() / block;
    }
    for raw in linear_raw {
        let root = find(&mut parent, raw);
        let s = space_of_root(root, &mut spaces);
        spaces[s].prunable = false;
    }
    let space_of_src = |s: Source| match s {
        Source::Input => (input_space, 1),
        Source::Node(j) => node_space[j],
    };
    for (i, node) in net.nodes.iter().enumerate() {
        match &node.layer {
            Layer::Conv2d(_) => {
                spaces[node_space[i].0].producers.push(i);
                spaces[space_of_src(node.inputs[0]).0]
                    .consumers
                    .push((i, 1));
            }
            Layer::Linear(_) => {
                let (s, b) = space_of_src(node.inputs[0]);
                spaces[s].consumers.push((i, b));
            }
            Layer::BatchNorm2d(_) => spaces[node_space[i].0].norms.push(i),
            _ => {}
        }
    }
    for sp in &mut spaces {
        if sp.producers.is_empty() {
            sp.prunable = false;
        }
    }
    Ok(SpaceMap { spaces, node_space })
}

fn group_for(space: &ChannelSpace, c: usize) -> CouplingGroup {
    let mut members = Vec::new();
    for &p in &space.producers {
        members.push(Member {
            layer: p,
            axis: Axis::OutChannels,
            channels: c..c + 1,
        });
    }
    for &n in &space.norms {
        members.push(Member {
            layer: n,
            axis: Axis::BnChannels,
            channels: c..c + 1,
        });
    }
    for &(n, b) in &space.consumers {
        members.push(Member {
            layer: n,
            axis: Axis::InChannels,
            channels: c * b..(c + 1) * b,
        });
    }
    CouplingGroup {
        anchor: FilterId::new(space.producers[0], c),
        members,
    }
}

/// One group per prunable channel, ordered by anchor.
pub fn build_coupling_groups(net: &Network) -> Result<Vec<CouplingGroup>> {
    let map = channel_spaces(net)?;
    let mut groups: Vec<CouplingGroup> = map
        .spaces
        .iter()
        .filter(|s| s.prunable)
        .flat_map(|s| (0..s.channels).map(move |c| group_for(s, c)))
        .collect();
    groups.sort_by_key(|g| g.anchor);
    Ok(groups)
}

fn keep_rows(t: &Tensor, keep: &[usize]) -> Tensor {
    let row = t.row_len();
    let mut data = Vec::with_capacity(keep.len() * row);
    for &k in keep {
        data.extend_from_slice(t.row(k));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    Tensor::new(shape, data).expect("row selection is consistent")
}

/// Keeps blocks of `block` consecutive indices along axis 1 of a 2-D or 4-D
/// weight tensor.
fn keep_cols(t: &Tensor, keep: &[usize], block: usize) -> Tensor {
    let rows = t.shape()[0];
    let inner: usize = t.shape()[2..].iter().product::<usize>() * block;
    let old_cols = t.shape()[1] / block;
    let mut data = Vec::with_capacity(rows * keep.len() * inner);
    for r in 0..rows {
        let row = &t.data()[r * old_cols * inner..(r + 1) * old_cols * inner];
        for &k in keep {
            data.extend_from_slice(&row[k * inner..(k + 1) * inner]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[1] = keep.len() * block;
    Tensor::new(shape, data).expect("column selection is consistent")
}

fn keep_vec(t: &Tensor, keep: &[usize]) -> Tensor {
    let data = keep.iter().map(|&k| t.data()[k]).collect();
    Tensor::new(vec![keep.len()], data).expect("vector selection is consistent")
}

/// Resolves group anchors to `(space, channel)` pairs in the current network.
pub fn locate(map: &SpaceMap, anchor: FilterId) -> Result<(usize, usize)> {
    let err = Error::UnknownGroup {
        layer: anchor.layer,
        filter: anchor.filter,
    };
    let s = map.prunable_space_of(anchor.layer).ok_or(err.clone())?;
    if anchor.filter >= map.spaces[s].channels {
        return Err(err);
    }
    Ok((s, anchor.filter))
}

/// Removes every slice of `groups` and returns the smaller network.
///
/// Refuses with [`Error::LayerCollapse`] when a space would lose all of its
/// channels.
pub fn apply_prune(net: &Network, groups: &[CouplingGroup]) -> Result<Network> {
    let map = channel_spaces(net)?;
    let mut removed: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for g in groups {
        let (s, c) = locate(&map, g.anchor)?;
        removed
            .entry(s)
            .or_insert_with(|| vec![false; map.spaces[s].channels])[c] = true;
    }
    let mut keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&s, mask) in &removed {
        let k: Vec<usize> = (0..mask.len()).filter(|&c| !mask[c]).collect();
        if k.is_empty() {
            let anchor = map.anchor(s).unwrap_or(0);
            return Err(Error::LayerCollapse {
                layer: net.nodes[anchor].name.clone(),
            });
        }
        keep.insert(s, k);
    }

    let mut out = net.clone();
    for (i, node) in out.nodes.iter_mut().enumerate() {
        let (out_space, _) = map.node_space[i];
        let in_space = match node.inputs.first() {
            Some(Source::Node(j)) => map.node_space[*j],
            _ => (usize::MAX, 1),
        };
        let out_keep = keep.get(&out_space);
        let in_keep = keep.get(&in_space.0);
        match &mut node.layer {
            Layer::Conv2d(conv) => {
                if let Some(k) = out_keep {
                    conv.weight = keep_rows(&conv.weight, k);
                    conv.bias = conv.bias.as_ref().map(|b| keep_vec(b, k));
                    conv.out_channels = k.len();
                }
                if let Some(k) = in_keep {
                    conv.weight = keep_cols(&conv.weight, k, 1);
                    conv.in_channels = k.len();
                }
            }
            Layer::BatchNorm2d(bn) => {
                if let Some(k) = out_keep {
                    bn.gamma = keep_vec(&bn.gamma, k);
                    bn.beta = keep_vec(&bn.beta, k);
                    bn.running_mean = keep_vec(&bn.running_mean, k);
                    bn.running_var = keep_vec(&bn.running_var, k);
                    bn.channels = k.len();
                }
            }
            Layer::Linear(lin) => {
                if let Some(k) = in_keep {
                    lin.weight = keep_cols(&lin.weight, k, in_space.1);
                    lin.in_features = k.len() * in_space.1;
                }
            }
            _ => {}
        }
    }
    out.validate().map_err(|e| Error::InvalidGraph(format!("pruned network: {e}")))?;
    Ok(out)
}

/// Sets the input-side slices of a group (what the rest of the network
/// reads from the channel) to zero, leaving shapes intact.
pub fn zero_fan_out(net: &mut Network, group: &CouplingGroup) {
    for m in &group.members {
        if m.axis != Axis::InChannels {
            continue;
        }
        match &mut net.nodes[m.layer].layer {
            Layer::Conv2d(conv) => {
                let (o, i) = (conv.out_channels, conv.in_channels);
                let area = conv.kernel_area();
                let d = conv.weight.data_mut();
                for oc in 0..o {
                    for c in m.channels.clone() {
                        d[(oc * i + c) * area..(oc * i + c + 1) * area].fill(0.0);
                    }
                }
            }
            Layer::Linear(lin) => {
                let fin = lin.in_features;
                let d = lin.weight.data_mut();
                for o in 0..lin.out_features {
                    d[o * fin + m.channels.start..o * fin + m.channels.end].fill(0.0);
                }
            }
            _ => {}
        }
    }
}
