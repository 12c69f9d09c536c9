//! Experiment configuration and the command implementations behind the CLI.
//!
//! Every command takes a resolved [`ExperimentConfig`], writes its outputs
//! under `paths.out` and embeds the full config in each file. All
//! randomness (initialization, shuffling, batch sampling, the random
//! criterion) is derived from `seed`; the synthetic dataset has its own
//! `data.seed` so that one dataset can serve many seeded runs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nexp_core::analysis::state_similarity_report;
use nexp_core::arch::{build_initialized, init_weights, Arch};
use nexp_core::coupling::build_coupling_groups;
use nexp_core::prune::{pai_sweep, run_pruning, Criterion, FineTune, PruneConfig, PruneRun};
use nexp_core::sampling::{sample_batch, synthetic_blobs, Dataset, SamplingSpec, SyntheticSpec};
use nexp_core::scoring::{
    group_l1_importance, group_scores, hybrid_score, nexp_map, HybridConfig, NexpOptions,
};
use nexp_core::train::{evaluate, train, LrSchedule, TrainConfig};
use nexp_core::{Layer, Network, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, read_arch, save_checkpoint, write_json};
use crate::data::{load_dataset, read_labeled_images, save_dataset};
use crate::report::{
    read_score_map, similarity_rows, write_hybrid_sweep_csv, write_pai_csv, write_score_csv,
    write_score_json, write_similarity_csv, write_train_log_csv, write_trajectory_csv, PaiCell,
    SweepCell,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionName {
    #[default]
    Nexp,
    L1,
    Hybrid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// A dataset directory, or a labeled-image file read with `data.shape`
    /// and `data.classes`. Without it the synthetic generator is used.
    pub dataset: Option<PathBuf>,
    /// Architecture file; overrides `arch`.
    pub arch: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub arch: Arch,
    pub data: SyntheticSpec,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub prune: PruneConfig,
    pub criterion: CriterionName,
    pub hybrid: HybridConfig,
    pub sampling: SamplingSpec,
    pub tau_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub pai_exponents: Vec<f64>,
    pub first_n: usize,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths { out: PathBuf::from("out"), ..Default::default() },
            arch: Arch::Resnet,
            data: SyntheticSpec::default(),
            test_fraction: 0.25,
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                lr: 0.05,
                schedule: LrSchedule::Step { every: 10, gamma: 0.2 },
                seed: 0,
            },
            finetune: TrainConfig {
                epochs: 20,
                batch_size: 32,
                lr: 0.01,
                schedule: LrSchedule::Constant,
                seed: 0,
            },
            prune: PruneConfig::default(),
            criterion: CriterionName::Nexp,
            hybrid: HybridConfig { alpha: 0.5 },
            sampling: SamplingSpec::default(),
            tau_grid: vec![1.5, 2.0, 3.0],
            alpha_grid: HybridConfig::GRID.to_vec(),
            pai_exponents: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            first_n: 5,
            workers: 1,
        }
    }
}

/// Sub-seed `k` of the experiment seed.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    /// Fills derived seeds and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = sub_seed(self.seed, 1);
        self.finetune.seed = sub_seed(self.seed, 2);
        self.sampling.seed = sub_seed(self.seed, 3);
        self.prune.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Format(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        if !(0.0..=1.0).contains(&self.hybrid.alpha) || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Format("alpha values must lie in [0, 1]".into()));
        }
        if self.tau_grid.iter().any(|t| *t < 1.0) {
            return Err(Error::Format("tau values must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Format("workers must be positive".into()));
        }
        for p in [&self.paths.dataset, &self.paths.arch, &self.paths.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Format(format!("{}: no such file or directory", p.display())));
            }
        }
        Ok(self)
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, 4)
    }

    pub fn criterion(&self) -> Criterion {
        match self.criterion {
            CriterionName::Nexp => Criterion::Nexp,
            CriterionName::L1 => Criterion::L1,
            CriterionName::Hybrid => Criterion::Hybrid { alpha: self.hybrid.alpha },
            CriterionName::Random => Criterion::Random { seed: sub_seed(self.seed, 5) },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.paths.out).map_err(Error::io(&self.paths.out))?;
        Ok(self.paths.out.join(name))
    }

    fn checkpoint(&self) -> Result<Network> {
        let p = self.paths.checkpoint.as_ref().ok_or_else(|| Error::Format("paths.checkpoint is required".into()))?;
        load_checkpoint(p)
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.paths.dataset {
        Some(p) if p.is_dir() => load_dataset(p),
        Some(p) => read_labeled_images(p, cfg.data.shape, cfg.data.classes),
        None => Ok(synthetic_blobs(&cfg.data)?),
    }
}

/// Train and test splits.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok(load_data(cfg)?.split(cfg.test_fraction, cfg.data.seed)?)
}

/// A freshly initialized network for the dataset.
pub fn init_network(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Network> {
    match &cfg.paths.arch {
        Some(p) => {
            let mut net = read_arch(p)?.build()?;
            init_weights(&mut net, cfg.init_seed());
            Ok(net)
        }
        None => Ok(build_initialized(cfg.arch, ds.sample_shape(), ds.classes(), cfg.init_seed())?),
    }
}

const EVAL_BATCH: usize = 256;

/// Fine-tune hook: trains on one split and reports accuracy on another.
pub struct FineTuner<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub cfg: TrainConfig,
    calls: u64,
}

impl<'a> FineTuner<'a> {
    pub fn new(train: &'a Dataset, test: &'a Dataset, cfg: TrainConfig) -> Self {
        Self { train, test, cfg, calls: 0 }
    }
}

impl FineTune for FineTuner<'_> {
    fn finetune(&mut self, net: &mut Network, epochs: usize) -> nexp_core::Result<Option<f64>> {
        let cfg = TrainConfig { epochs, seed: self.cfg.seed.wrapping_add(self.calls), ..self.cfg };
        self.calls += 1;
        train(net, self.train, &cfg)?;
        Ok(Some(evaluate(net, self.test, EVAL_BATCH)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub shortfall: bool,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn ok(files: Vec<PathBuf>) -> Self {
        Self { shortfall: false, files }
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = synthetic_blobs(&cfg.data)?;
    let dir = cfg.out("dataset")?;
    save_dataset(&dir, &ds, &cfg.to_json())?;
    Ok(Outcome::ok(vec![dir]))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (train_set, test_set) = load_splits(cfg)?;
    let mut net = init_network(cfg, &train_set)?;
    let log = train(&mut net, &train_set, &cfg.train)?;
    let accuracy = evaluate(&net, &test_set, EVAL_BATCH)?;
    let json = cfg.to_json();
    let ckpt = cfg.out("checkpoint")?;
    save_checkpoint(&ckpt, &net, &json)?;
    let log_csv = cfg.out("train_log.csv")?;
    write_train_log_csv(&log_csv, &log, &json)?;
    let summary = cfg.out("train.json")?;
    write_json(&summary, &serde_json::json!({ "config": json, "test_accuracy": accuracy, "log": log }))?;
    Ok(Outcome::ok(vec![ckpt, log_csv, summary]))
}

fn strategy_name(spec: &SamplingSpec) -> String {
    serde_json::to_value(spec.strategy)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn cmd_score(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = cfg.checkpoint()?;
    let (train_set, _) = load_splits(cfg)?;
    let batch = sample_batch(&train_set, &cfg.sampling)?;
    let opts = NexpOptions { provenance: strategy_name(&cfg.sampling), ..Default::default() };
    let nexp = nexp_map(&net, &batch, &opts)?;
    let groups = build_coupling_groups(&net)?;
    let imp = group_l1_importance(&net, &groups);
    let hybrid = hybrid_score(&imp, &group_scores(&nexp, &groups)?, cfg.hybrid)?;
    let json = cfg.to_json();
    let mut files = Vec::new();
    for (name, map) in [("nexp_map", &nexp), ("importance_map", &imp), ("hybrid_map", &hybrid)] {
        let csv = cfg.out(&format!("{name}.csv"))?;
        write_score_csv(&csv, map, &json)?;
        let js = cfg.out(&format!("{name}.json"))?;
        write_score_json(&js, map, &json)?;
        files.extend([csv, js]);
    }
    Ok(Outcome::ok(files))
}

fn scoring_batch(cfg: &ExperimentConfig, train_set: &Dataset, criterion: Criterion) -> Result<Tensor> {
    if criterion.needs_batch() {
        Ok(sample_batch(train_set, &cfg.sampling)?)
    } else {
        Ok(Tensor::zeros(&[0]))
    }
}

pub fn cmd_prune(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = cfg.checkpoint()?;
    let (train_set, test_set) = load_splits(cfg)?;
    let baseline = evaluate(&net, &test_set, EVAL_BATCH)?;
    let criterion = cfg.criterion();
    let batch = scoring_batch(cfg, &train_set, criterion)?;
    let mut hook = FineTuner::new(&train_set, &test_set, cfg.finetune);
    let run = run_pruning(&net, &batch, &cfg.prune, criterion, Some(&mut hook))?;
    let json = cfg.to_json();
    let pruned = cfg.out("pruned")?;
    save_checkpoint(&pruned, run.network.as_ref().expect("run keeps its network"), &json)?;
    let traj = cfg.out("trajectory.csv")?;
    write_trajectory_csv(&traj, &run, Some(baseline), &json)?;
    let full = cfg.out("prune_run.json")?;
    write_json(&full, &serde_json::json!({ "config": json, "baseline_accuracy": baseline, "run": run }))?;
    Ok(Outcome { shortfall: run.shortfall.is_some(), files: vec![pruned, traj, full] })
}

/// Runs `f` over `0..n` on up to `workers` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                out.lock().expect("result lock")[i] = Some(v);
            });
        }
    });
    out.into_inner().expect("result lock").into_iter().map(|v| v.expect("every cell ran")).collect()
}

/// One hybrid-sweep cell: prune at `(tau, alpha)`, fine-tune, evaluate.
pub fn sweep_cell(
    net: &Network,
    batch: &Tensor,
    base: &PruneConfig,
    tau: f64,
    alpha: f64,
    hook: &mut dyn FineTune,
    baseline: f64,
) -> (SweepCell, Option<PruneRun>) {
    let cfg = PruneConfig { tau, ..base.clone() };
    match run_pruning(net, batch, &cfg, Criterion::Hybrid { alpha }, Some(hook)) {
        Ok(run) => {
            let cell = SweepCell {
                tau,
                alpha,
                ratio_params: Some(run.final_report.ratio_params),
                ratio_flops: Some(run.final_report.ratio_flops),
                accuracy: run.final_accuracy,
                delta_accuracy: run.final_accuracy.map(|a| a - baseline),
                status: if run.shortfall.is_some() { "shortfall".into() } else { "ok".into() },
            };
            (cell, Some(run))
        }
        Err(e) => (
            SweepCell {
                tau,
                alpha,
                ratio_params: None,
                ratio_flops: None,
                accuracy: None,
                delta_accuracy: None,
                status: format!("failed: {e}"),
            },
            None,
        ),
    }
}

/// Per tau, whether params ratio never decreases as alpha grows.
pub fn alpha_trend(cells: &[SweepCell]) -> Vec<(f64, bool)> {
    let mut taus: Vec<f64> = Vec::new();
    for c in cells {
        if !taus.contains(&c.tau) {
            taus.push(c.tau);
        }
    }
    taus.into_iter()
        .map(|t| {
            let mut col: Vec<(f64, f64)> = cells
                .iter()
                .filter(|c| c.tau == t)
                .filter_map(|c| c.ratio_params.map(|r| (c.alpha, r)))
                .collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0));
            (t, col.windows(2).all(|w| w[1].1 >= w[0].1))
        })
        .collect()
}

pub fn cmd_hybrid_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = cfg.checkpoint()?;
    let (train_set, test_set) = load_splits(cfg)?;
    let baseline = evaluate(&net, &test_set, EVAL_BATCH)?;
    let batch = sample_batch(&train_set, &cfg.sampling)?;
    let grid: Vec<(f64, f64)> = cfg
        .tau_grid
        .iter()
        .flat_map(|&t| cfg.alpha_grid.iter().map(move |&a| (t, a)))
        .collect();
    let cells = parallel_map(grid.len(), cfg.workers, |i| {
        let (tau, alpha) = grid[i];
        let mut hook = FineTuner::new(&train_set, &test_set, cfg.finetune);
        sweep_cell(&net, &batch, &cfg.prune, tau, alpha, &mut hook, baseline).0
    });
    let trend = alpha_trend(&cells);
    let trend_json = serde_json::to_string(
        &trend.iter().map(|(t, ok)| serde_json::json!({ "tau": t, "params_ratio_rises_with_alpha": ok })).collect::<Vec<_>>(),
    )
    .expect("trend serializes");
    let json = cfg.to_json();
    let csv = cfg.out("hybrid_sweep.csv")?;
    write_hybrid_sweep_csv(&csv, &cells, &json, &[("baseline_accuracy", baseline.to_string()), ("trend", trend_json)])?;
    let js = cfg.out("hybrid_sweep.json")?;
    write_json(&js, &serde_json::json!({ "config": json, "baseline_accuracy": baseline, "cells": cells, "trend": trend }))?;
    Ok(Outcome::ok(vec![csv, js]))
}

/// Narrowest conv in `net`.
pub fn min_conv_width(net: &Network) -> usize {
    net.nodes
        .iter()
        .filter_map(|n| match &n.layer {
            Layer::Conv2d(c) => Some(c.out_channels),
            _ => None,
        })
        .min()
        .unwrap_or(0)
}

pub fn cmd_pai_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (train_set, test_set) = load_splits(cfg)?;
    let net = init_network(cfg, &train_set)?;
    let criterion = cfg.criterion();
    let batch = scoring_batch(cfg, &train_set, criterion)?;
    let runs = pai_sweep(&net, &batch, &cfg.pai_exponents, &cfg.prune, criterion)?;
    let cells = parallel_map(runs.len(), cfg.workers, |i| -> Result<PaiCell> {
        let run = &runs[i];
        let mut pruned = run.network.clone().expect("run keeps its network");
        train(&mut pruned, &train_set, &cfg.train)?;
        Ok(PaiCell {
            exponent: cfg.pai_exponents[i],
            target_ratio: run.config.tau,
            ratio_params: run.final_report.ratio_params,
            ratio_flops: run.final_report.ratio_flops,
            accuracy: Some(evaluate(&pruned, &test_set, EVAL_BATCH)?),
            min_width: min_conv_width(&pruned),
            status: if run.shortfall.is_some() { "shortfall".into() } else { "ok".into() },
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let json = cfg.to_json();
    let csv = cfg.out("pai_sweep.csv")?;
    write_pai_csv(&csv, &cells, &json)?;
    let js = cfg.out("pai_sweep.json")?;
    write_json(&js, &serde_json::json!({ "config": json, "cells": cells }))?;
    Ok(Outcome { shortfall: cells.iter().any(|c| c.status != "ok"), files: vec![csv, js] })
}

pub fn cmd_compare_maps(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<Outcome> {
    let ma = read_score_map(a)?;
    let mb = read_score_map(b)?;
    let report = state_similarity_report(&ma, &mb, cfg.first_n).map_err(|e| match e {
        nexp_core::Error::KeyMismatch => {
            Error::Format(format!("{} and {} come from different architectures", a.display(), b.display()))
        }
        e => e.into(),
    })?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let label = format!("{}_vs_{}", stem(a), stem(b));
    let mut rows = similarity_rows(&label, "all", &report.all);
    rows.extend(similarity_rows(&label, &format!("first_{}", report.first_n_layers), &report.first_n));
    let json = cfg.to_json();
    let csv = cfg.out("similarity.csv")?;
    write_similarity_csv(&csv, &rows, &json)?;
    let js = cfg.out("similarity.json")?;
    write_json(&js, &serde_json::json!({ "config": json, "comparison": label, "report": report }))?;
    Ok(Outcome::ok(vec![csv, js]))
}
