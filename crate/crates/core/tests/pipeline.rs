use nexp_core::arch::{build_initialized, Arch};
use nexp_core::engine::{forward, BnMode, ForwardOptions};
use nexp_core::profile::{compression_report, count_params};
use nexp_core::prune::{run_pruning, Criterion, PruneConfig, Schedule};
use nexp_core::sampling::{sample_batch, synthetic_blobs, SamplingSpec, SyntheticSpec};
use nexp_core::scoring::{nexp_map, NexpOptions};
use nexp_core::train::{evaluate, train, TrainConfig};

#[test]
fn train_score_prune_and_run() {
    let ds = synthetic_blobs(&SyntheticSpec { samples: 256, ..Default::default() }).unwrap();
    let (tr, te) = ds.split(0.25, 7).unwrap();
    let mut net = build_initialized(Arch::Resnet, [3, 8, 8], ds.classes(), 3).unwrap();
    train(&mut net, &tr, &TrainConfig { epochs: 3, ..Default::default() }).unwrap();

    let batch = sample_batch(&tr, &SamplingSpec { batch_size: 32, seed: 2, ..Default::default() }).unwrap();
    let map = nexp_map(&net, &batch, &NexpOptions::default()).unwrap();
    assert!(!map.is_empty());
    assert!(map.entries().all(|e| (0.0..=1.0).contains(&e.score)));

    let cfg = PruneConfig { tau: 1.5, schedule: Schedule::Iterative, ..Default::default() };
    let run = run_pruning(&net, &batch, &cfg, Criterion::Nexp, None).unwrap();
    assert!(run.shortfall.is_none());
    let pruned = run.network.unwrap();
    assert!(count_params(&pruned) < count_params(&net));
    assert!(compression_report(&net, &pruned).unwrap().ratio_flops >= 1.5);

    let out = forward(&pruned, te.samples(), &ForwardOptions::inference(BnMode::Running)).unwrap();
    assert_eq!(out.output().shape(), &[te.len(), ds.classes()]);
    assert!(out.output().data().iter().all(|v| v.is_finite()));
    let acc = evaluate(&pruned, &te, 64).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
