//! Filter scoring: neural expressiveness (NEXP), group-L1 importance and
//! their hybrid.
//!
//! The NEXP score of a filter is the mean normalized Hamming distance
//! between its binarized activation patterns over every unordered pair of
//! samples in a batch. The pairwise table is never materialized: the upper
//! triangle is streamed and the integer distances are summed exactly before
//! a single final division, so the score is the correctly rounded value of
//! `Σ_{i<j} popcount(sᵢ ⊕ sⱼ) / (P · N(N−1)/2)`.

use alloc::collections::btree_map::Entry;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::{binarize_capture, PatternSet};
use crate::coupling::{channel_spaces, Axis, CouplingGroup, FilterId};
use crate::engine::{capture_points, forward, BnMode, ForwardOptions};
use crate::graph::Network;
use crate::layer::Layer;
use crate::rng::seeded;
use crate::{Error, Result, Tensor};

/// Statistic used to reduce the pairwise distances of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Min,
    Max,
    Median,
}

pub fn nexp_score(set: &PatternSet) -> Result<f64> {
    nexp_score_with(set, Aggregate::Mean)
}

pub fn nexp_score_with(set: &PatternSet, agg: Aggregate) -> Result<f64> {
    let n = set.samples();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let p = set.bits() as f64;
    match agg {
        Aggregate::Mean => {
            let mut total = 0u64;
            for i in 0..n {
                for j in i + 1..n {
                    total += u64::from(set.distance(i, j));
                }
            }
            let pairs = (n * (n - 1) / 2) as f64;
            Ok(total as f64 / (p * pairs))
        }
        Aggregate::Min | Aggregate::Max => {
            let mut best = if agg == Aggregate::Min { u32::MAX } else { 0 };
            for i in 0..n {
                for j in i + 1..n {
                    let d = set.distance(i, j);
                    best = if agg == Aggregate::Min { best.min(d) } else { best.max(d) };
                }
            }
            Ok(f64::from(best) / p)
        }
        Aggregate::Median => {
            let mut all: Vec<u32> = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    all.push(set.distance(i, j));
                }
            }
            all.sort_unstable();
            let m = all.len();
            let med = if m % 2 == 1 {
                f64::from(all[m / 2])
            } else {
                (f64::from(all[m / 2 - 1]) + f64::from(all[m / 2])) / 2.0
            };
            Ok(med / p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Nexp,
    GroupL1,
    Hybrid,
    Random,
}

/// Scalar score per filter (or per coupling-group anchor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScoreMapRepr", from = "ScoreMapRepr")]
pub struct ScoreMap {
    pub kind: ScoreKind,
    /// Sampling strategy or other origin tag.
    pub provenance: String,
    /// Batch size the scores were computed from (0 when not data-driven).
    pub samples: usize,
    pub scores: BTreeMap<FilterId, f64>,
}

pub type NexpMap = ScoreMap;
pub type ImportanceMap = ScoreMap;

#[derive(Serialize, Deserialize)]
struct ScoreMapRepr {
    kind: ScoreKind,
    provenance: String,
    samples: usize,
    scores: Vec<ScoreEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub filter: usize,
    pub score: f64,
}

impl From<ScoreMap> for ScoreMapRepr {
    fn from(m: ScoreMap) -> Self {
        Self {
            kind: m.kind,
            provenance: m.provenance,
            samples: m.samples,
            scores: m
                .scores
                .iter()
                .map(|(k, &score)| ScoreEntry {
                    layer: k.layer,
                    filter: k.filter,
                    score,
                })
                .collect(),
        }
    }
}

impl From<ScoreMapRepr> for ScoreMap {
    fn from(r: ScoreMapRepr) -> Self {
        Self {
            kind: r.kind,
            provenance: r.provenance,
            samples: r.samples,
            scores: r
                .scores
                .into_iter()
                .map(|e| (FilterId::new(e.layer, e.filter), e.score))
                .collect(),
        }
    }
}

impl ScoreMap {
    pub fn new(kind: ScoreKind, provenance: impl Into<String>, samples: usize) -> Self {
        Self {
            kind,
            provenance: provenance.into(),
            samples,
            scores: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: FilterId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = ScoreEntry> + '_ {
        self.scores.iter().map(|(k, &score)| ScoreEntry {
            layer: k.layer,
            filter: k.filter,
            score,
        })
    }

    /// Keys in ascending score order, ties by `(layer, filter)`.
    pub fn ranking(&self) -> Vec<FilterId> {
        let mut keys: Vec<(FilterId, f64)> = self.scores.iter().map(|(k, &v)| (*k, v)).collect();
        keys.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        keys.into_iter().map(|(k, _)| k).collect()
    }

    /// Rescales every score to `[0, 1]` over the whole map. A constant map
    /// becomes all zeros.
    pub fn min_max_normalized(&self) -> Self {
        let min = self.scores.values().copied().fold(f64::INFINITY, f64::min);
        let max = self.scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let mut out = self.clone();
        for v in out.scores.values_mut() {
            *v = if range > 0.0 { (*v - min) / range } else { 0.0 };
        }
        out
    }

    /// Scores grouped by layer, each in filter order.
    pub fn by_layer(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (k, &v) in &self.scores {
            out.entry(k.layer).or_default().push(v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NexpOptions {
    /// Batch-norm mode for the scoring pass; `None` picks by weight state.
    pub bn_mode: Option<BnMode>,
    pub aggregate: Aggregate,
    pub provenance: String,
}

impl Default for NexpOptions {
    fn default() -> Self {
        Self {
            bn_mode: None,
            aggregate: Aggregate::Mean,
            provenance: "batch".into(),
        }
    }
}

/// Convs whose filters are scored: those producing into a prunable space.
fn scored_convs(net: &Network) -> Result<Vec<usize>> {
    let map = channel_spaces(net)?;
    Ok(net
        .conv_nodes()
        .filter(|&c| map.prunable_space_of(c).is_some())
        .collect())
}

/// Scores every prunable conv filter from one forward pass over `batch`.
pub fn nexp_map(net: &Network, batch: &Tensor, opts: &NexpOptions) -> Result<NexpMap> {
    let n = batch.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let convs = scored_convs(net)?;
    let points: Vec<_> = capture_points(net)
        .into_iter()
        .filter(|p| convs.contains(&p.conv))
        .collect();
    let mut capture: Vec<usize> = points.iter().map(|p| p.node).collect();
    capture.sort_unstable();
    capture.dedup();
    let mode = opts.bn_mode.unwrap_or_else(|| BnMode::for_inference(net));
    let pass = forward(
        net,
        batch,
        &ForwardOptions {
            bn_mode: mode,
            retain: false,
            capture,
        },
    )?;
    nexp_map_from_captures(net, pass.captured(), opts)
}

/// Builds the map from already captured activations keyed by node index.
pub fn nexp_map_from_captures(
    net: &Network,
    captured: &BTreeMap<usize, Tensor>,
    opts: &NexpOptions,
) -> Result<NexpMap> {
    let convs = scored_convs(net)?;
    let mut sets_by_node: BTreeMap<usize, Vec<PatternSet>> = BTreeMap::new();
    let mut map = ScoreMap::new(ScoreKind::Nexp, opts.provenance.clone(), 0);
    for p in capture_points(net) {
        if !convs.contains(&p.conv) {
            continue;
        }
        let sets = match sets_by_node.entry(p.node) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let t = captured.get(&p.node).ok_or_else(|| {
                    Error::Shape(alloc::format!("no activations captured at node {}", p.node))
                })?;
                e.insert(binarize_capture(p.node, t)?)
            }
        };
        let Layer::Conv2d(conv) = &net.nodes[p.conv].layer else {
            continue;
        };
        if sets.len() != conv.out_channels {
            return Err(Error::Shape(alloc::format!(
                "capture at node {} has {} channels, conv has {}",
                p.node,
                sets.len(),
                conv.out_channels
            )));
        }
        for set in sets {
            map.samples = set.samples();
            let score = nexp_score_with(set, opts.aggregate)?;
            map.scores.insert(FilterId::new(p.conv, set.filter), score);
        }
    }
    Ok(map)
}

fn producers(g: &CouplingGroup) -> impl Iterator<Item = FilterId> + '_ {
    g.members
        .iter()
        .filter(|m| m.axis == Axis::OutChannels)
        .map(|m| FilterId::new(m.layer, m.channels.start))
}

/// Per-group score: the mean over the group's producing filters.
pub fn group_scores(map: &ScoreMap, groups: &[CouplingGroup]) -> Result<ScoreMap> {
    let mut out = ScoreMap::new(map.kind, map.provenance.clone(), map.samples);
    for g in groups {
        let mut sum = 0.0;
        let mut count = 0usize;
        for id in producers(g) {
            sum += map.get(id).ok_or(Error::KeyMismatch)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::KeyMismatch);
        }
        out.scores.insert(g.anchor, sum / count as f64);
    }
    Ok(out)
}

/// Sum of absolute weights over every member slice of each group.
/// Biases and batch-norm parameters are not weights and are left out.
pub fn group_l1_importance(net: &Network, groups: &[CouplingGroup]) -> ImportanceMap {
    let mut out = ScoreMap::new(ScoreKind::GroupL1, "weights", 0);
    for g in groups {
        let mut sum = 0.0f64;
        for m in &g.members {
            let Some(node) = net.nodes.get(m.layer) else {
                continue;
            };
            match (&node.layer, m.axis) {
                (Layer::Conv2d(c), Axis::OutChannels) => {
                    let row = c.weight.row_len();
                    for ch in m.channels.clone() {
                        sum += c.weight.data()[ch * row..(ch + 1) * row]
                            .iter()
                            .map(|v| f64::from(v.abs()))
                            .sum::<f64>();
                    }
                }
                (Layer::Conv2d(c), Axis::InChannels) => {
                    let area = c.kernel_area();
                    for o in 0..c.out_channels {
                        for ch in m.channels.clone() {
                            let base = (o * c.in_channels + ch) * area;
                            sum += c.weight.data()[base..base + area]
                                .iter()
                                .map(|v| f64::from(v.abs()))
                                .sum::<f64>();
                        }
                    }
                }
                (Layer::Linear(l), Axis::InChannels) => {
                    for o in 0..l.out_features {
                        let row = &l.weight.data()[o * l.in_features..(o + 1) * l.in_features];
                        sum += row[m.channels.clone()]
                            .iter()
                            .map(|v| f64::from(v.abs()))
                            .sum::<f64>();
                    }
                }
                _ => {}
            }
        }
        out.scores.insert(g.anchor, sum);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Weight of the NEXP term; `1 − alpha` weighs importance.
    pub alpha: f64,
}

impl HybridConfig {
    pub const GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
}

/// `(1 − α)·IMP + α·NEXP` over network-wide min-max normalized maps.
pub fn hybrid_score(imp: &ImportanceMap, nexp: &NexpMap, cfg: HybridConfig) -> Result<ScoreMap> {
    if !imp.scores.keys().eq(nexp.scores.keys()) {
        return Err(Error::KeyMismatch);
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(alloc::format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    let a = imp.min_max_normalized();
    let b = nexp.min_max_normalized();
    let mut out = ScoreMap::new(
        ScoreKind::Hybrid,
        alloc::format!("alpha={};{}", cfg.alpha, nexp.provenance),
        nexp.samples,
    );
    for ((k, &x), &y) in a.scores.iter().zip(b.scores.values()) {
        out.scores.insert(*k, (1.0 - cfg.alpha) * x + cfg.alpha * y);
    }
    Ok(out)
}

/// Uniform random score per group, for the random-criterion baseline.
pub fn random_scores(groups: &[CouplingGroup], seed: u64) -> ScoreMap {
    let mut rng = seeded(seed);
    let mut out = ScoreMap::new(ScoreKind::Random, alloc::format!("seed={seed}"), 0);
    for g in groups {
        out.scores.insert(g.anchor, rng.gen::<f64>());
    }
    out
}

#[cfg(test)]
mod tests;
