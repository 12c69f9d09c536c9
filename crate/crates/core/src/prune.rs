//! Iterative bottom-κ group removal towards a compression target.
//!
//! Each step scores the surviving coupling groups, removes the lowest
//! `max(1, ⌈κ · remaining⌉)` of them (per layer under local scope) and
//! re-measures the network. Groups are reported by their original anchor
//! ids so logs from different steps refer to the same filters.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::coupling::{apply_prune, build_coupling_groups, CouplingGroup, FilterId};
use crate::graph::Network;
use crate::profile::{compression_report, count_flops, count_params, CompressionReport, FlopConvention};
use crate::scoring::{
    group_l1_importance, group_scores, hybrid_score, nexp_map, random_scores, HybridConfig,
    NexpOptions, ScoreKind, ScoreMap,
};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Every removal first, then a single fine-tune.
    #[default]
    OneShot,
    /// Fine-tune after each step.
    Iterative,
}

/// Quantity whose compression ratio is driven to `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Flops,
    Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    Nexp,
    L1,
    Hybrid { alpha: f64 },
    Random { seed: u64 },
}

impl Criterion {
    pub fn needs_batch(self) -> bool {
        matches!(self, Criterion::Nexp | Criterion::Hybrid { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub tau: f64,
    pub steps_max: usize,
    pub kappa_fraction: f64,
    pub scope: Scope,
    pub schedule: Schedule,
    pub finetune_epochs_per_step: usize,
    /// Steps between score refreshes; `usize::MAX` scores only once.
    pub score_update_every: usize,
    pub target: Target,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            steps_max: 64,
            kappa_fraction: 0.05,
            scope: Scope::Global,
            schedule: Schedule::OneShot,
            finetune_epochs_per_step: 0,
            score_update_every: 1,
            target: Target::Flops,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1.0 || !self.tau.is_finite() {
            return Err(Error::Config(alloc::format!("tau must be >= 1, got {}", self.tau)));
        }
        if !(self.kappa_fraction > 0.0 && self.kappa_fraction <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "kappa_fraction must lie in (0, 1], got {}",
                self.kappa_fraction
            )));
        }
        if self.steps_max == 0 || self.score_update_every == 0 {
            return Err(Error::Config("steps_max and score_update_every must be positive".into()));
        }
        Ok(())
    }
}

/// Trainer callback invoked by the pruning loop.
pub trait FineTune {
    /// Trains `net` in place for `epochs` epochs and returns the accuracy
    /// to log, if the hook measures one.
    fn finetune(&mut self, net: &mut Network, epochs: usize) -> Result<Option<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub groups: Vec<CouplingGroup>,
    /// True when the collapse guard kept a lower-scoring group in place.
    pub guard_bound: bool,
}

fn bucket_of(scope: Scope, g: &CouplingGroup) -> usize {
    match scope {
        Scope::Global => 0,
        Scope::Local => g.anchor.layer,
    }
}

fn select_with(
    scores: &ScoreMap,
    groups: &[CouplingGroup],
    scope: Scope,
    quota: impl Fn(usize) -> usize,
) -> Result<Selection> {
    let mut ranked: Vec<(f64, &CouplingGroup)> = Vec::with_capacity(groups.len());
    for g in groups {
        ranked.push((scores.get(g.anchor).ok_or(Error::KeyMismatch)?, g));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.anchor.cmp(&b.1.anchor)));

    // every group of one space shares its anchor layer
    let mut space_size: BTreeMap<usize, usize> = BTreeMap::new();
    let mut bucket_size: BTreeMap<usize, usize> = BTreeMap::new();
    for g in groups {
        *space_size.entry(g.anchor.layer).or_default() += 1;
        *bucket_size.entry(bucket_of(scope, g)).or_default() += 1;
    }
    let mut taken_space: BTreeMap<usize, usize> = BTreeMap::new();
    let mut taken_bucket: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Selection {
        groups: Vec::new(),
        guard_bound: false,
    };
    for (_, g) in ranked {
        let b = bucket_of(scope, g);
        let tb = taken_bucket.entry(b).or_default();
        if *tb >= quota(bucket_size[&b]) {
            continue;
        }
        let ts = taken_space.entry(g.anchor.layer).or_default();
        if *ts + 1 >= space_size[&g.anchor.layer] {
            out.guard_bound = true;
            continue;
        }
        *ts += 1;
        *tb += 1;
        out.groups.push(g.clone());
    }
    if out.groups.is_empty() {
        return Err(Error::NoPrunableGroup);
    }
    out.groups.sort_by_key(|g| g.anchor);
    Ok(out)
}

/// The `k` lowest-scoring groups network-wide (global) or per layer
/// (local), skipping any group whose removal would empty its layer.
pub fn select_bottom_k(
    scores: &ScoreMap,
    groups: &[CouplingGroup],
    k: usize,
    scope: Scope,
) -> Result<Selection> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    select_with(scores, groups, scope, |_| k)
}

/// Like [`select_bottom_k`] with `k = max(1, ⌈fraction · n⌉)` for a bucket
/// of `n` groups.
pub fn select_fraction(
    scores: &ScoreMap,
    groups: &[CouplingGroup],
    fraction: f64,
    scope: Scope,
) -> Result<Selection> {
    select_with(scores, groups, scope, |n| kappa(fraction, n))
}

pub fn kappa(fraction: f64, remaining: usize) -> usize {
    (libm::ceil(fraction * remaining as f64) as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortfallReason {
    StepBudget,
    CollapseGuard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub reason: ShortfallReason,
    pub target: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Removed groups by original anchor id, ascending.
    pub removed: Vec<FilterId>,
    /// Score of each removed group at removal time.
    pub scores: Vec<f64>,
    pub scores_refreshed: bool,
    pub guard_bound: bool,
    pub groups_remaining: usize,
    pub report: CompressionReport,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRun {
    pub config: PruneConfig,
    pub criterion: Criterion,
    pub steps: Vec<StepRecord>,
    pub final_report: CompressionReport,
    pub final_accuracy: Option<f64>,
    pub shortfall: Option<Shortfall>,
    #[serde(skip)]
    pub network: Option<Network>,
}

impl PruneRun {
    /// Every removed group in removal order.
    pub fn removal_sequence(&self) -> Vec<FilterId> {
        self.steps.iter().flat_map(|s| s.removed.iter().copied()).collect()
    }
}

fn achieved(report: &CompressionReport, target: Target) -> f64 {
    match target {
        Target::Flops => report.ratio_flops,
        Target::Params => report.ratio_params,
    }
}

fn score_groups(
    net: &Network,
    groups: &[CouplingGroup],
    batch: &Tensor,
    criterion: Criterion,
) -> Result<ScoreMap> {
    let nexp = || -> Result<ScoreMap> {
        let map = nexp_map(net, batch, &NexpOptions::default())?;
        group_scores(&map, groups)
    };
    match criterion {
        Criterion::Nexp => nexp(),
        Criterion::L1 => Ok(group_l1_importance(net, groups)),
        Criterion::Hybrid { alpha } => {
            hybrid_score(&group_l1_importance(net, groups), &nexp()?, HybridConfig { alpha })
        }
        Criterion::Random { seed } => Ok(random_scores(groups, seed)),
    }
}

/// Runs the pruning loop on a copy of `net`.
///
/// An unreachable target is not an error: the run stops and records a
/// [`Shortfall`] naming whether the step budget or the collapse guard bound.
pub fn run_pruning(
    net: &Network,
    batch: &Tensor,
    cfg: &PruneConfig,
    criterion: Criterion,
    mut finetune: Option<&mut dyn FineTune>,
) -> Result<PruneRun> {
    cfg.validate()?;
    if criterion.needs_batch() {
        let n = batch.shape().first().copied().unwrap_or(0);
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
    }
    net.validate()?;
    let flops0 = count_flops(net, FlopConvention::Macs)?;
    let params0 = count_params(net);
    let mut current = net.clone();
    let mut report = CompressionReport::from_counts((flops0, flops0), (params0, params0));

    let initial = build_coupling_groups(&current)?;
    // surviving original channel indices per space, keyed by anchor layer
    let mut origin: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in &initial {
        origin.entry(g.anchor.layer).or_default().push(g.anchor.filter);
    }
    let to_orig = |origin: &BTreeMap<usize, Vec<usize>>, id: FilterId| {
        FilterId::new(id.layer, origin[&id.layer][id.filter])
    };
    let mut stale: BTreeMap<FilterId, f64> = BTreeMap::new();
    let mut last_kind = ScoreKind::Nexp;

    let mut steps = Vec::new();
    let mut guard_blocked = false;
    let mut step = 0usize;
    while achieved(&report, cfg.target) < cfg.tau && step < cfg.steps_max {
        let groups = build_coupling_groups(&current)?;
        let refresh = stale.is_empty()
            || (step.is_multiple_of(cfg.score_update_every) && !matches!(criterion, Criterion::Random { .. }));
        if refresh {
            let fresh = score_groups(&current, &groups, batch, criterion)?;
            last_kind = fresh.kind;
            stale.clear();
            for (id, v) in &fresh.scores {
                stale.insert(to_orig(&origin, *id), *v);
            }
        }
        let mut scores = ScoreMap::new(last_kind, "engine", 0);
        for g in &groups {
            let v = stale.get(&to_orig(&origin, g.anchor)).ok_or(Error::KeyMismatch)?;
            scores.scores.insert(g.anchor, *v);
        }
        let sel = match select_fraction(&scores, &groups, cfg.kappa_fraction, cfg.scope) {
            Ok(s) => s,
            Err(Error::NoPrunableGroup) => {
                guard_blocked = true;
                break;
            }
            Err(e) => return Err(e),
        };
        current = apply_prune(&current, &sel.groups)?;
        let mut removed: Vec<(FilterId, f64)> = sel
            .groups
            .iter()
            .map(|g| (to_orig(&origin, g.anchor), scores.scores[&g.anchor]))
            .collect();
        removed.sort_by_key(|r| r.0);
        // drop removed channels from the origin table, highest index first
        for g in sel.groups.iter().rev() {
            origin.get_mut(&g.anchor.layer).expect("known space").remove(g.anchor.filter);
        }
        for (id, _) in &removed {
            stale.remove(id);
        }
        report = compression_report(net, &current)?;
        let mut accuracy = None;
        if cfg.schedule == Schedule::Iterative && cfg.finetune_epochs_per_step > 0 {
            if let Some(hook) = finetune.as_deref_mut() {
                accuracy = hook.finetune(&mut current, cfg.finetune_epochs_per_step)?;
            }
        }
        guard_blocked = sel.guard_bound;
        steps.push(StepRecord {
            step,
            removed: removed.iter().map(|r| r.0).collect(),
            scores: removed.iter().map(|r| r.1).collect(),
            scores_refreshed: refresh,
            guard_bound: sel.guard_bound,
            groups_remaining: groups.len() - sel.groups.len(),
            report,
            accuracy,
        });
        step += 1;
    }

    let mut final_accuracy = steps.last().and_then(|s| s.accuracy);
    if cfg.schedule == Schedule::OneShot && cfg.finetune_epochs_per_step > 0 && !steps.is_empty() {
        if let Some(hook) = finetune {
            final_accuracy = hook.finetune(&mut current, cfg.finetune_epochs_per_step)?;
            if let Some(last) = steps.last_mut() {
                last.accuracy = final_accuracy;
            }
        }
    }
    let got = achieved(&report, cfg.target);
    let shortfall = (got < cfg.tau).then_some(Shortfall {
        reason: if guard_blocked {
            ShortfallReason::CollapseGuard
        } else {
            ShortfallReason::StepBudget
        },
        target: cfg.tau,
        achieved: got,
    });
    Ok(PruneRun {
        config: cfg.clone(),
        criterion,
        steps,
        final_report: report,
        final_accuracy,
        shortfall,
        network: Some(current),
    })
}

/// Pruning at initialization: one params-targeted one-shot run per exponent
/// `r`, aiming at a params ratio of `10^r`. Training the results is left to
/// the caller.
pub fn pai_sweep(
    net_at_init: &Network,
    batch: &Tensor,
    exponents: &[f64],
    base: &PruneConfig,
    criterion: Criterion,
) -> Result<Vec<PruneRun>> {
    exponents
        .iter()
        .map(|&r| {
            let cfg = PruneConfig {
                tau: libm::pow(10.0, r),
                target: Target::Params,
                schedule: Schedule::OneShot,
                finetune_epochs_per_step: 0,
                ..base.clone()
            };
            run_pruning(net_at_init, batch, &cfg, criterion, None)
        })
        .collect()
}
