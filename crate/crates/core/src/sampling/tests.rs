use super::*;
use alloc::vec::Vec;

fn tiny(values: &[(f32, usize)], classes: usize) -> Dataset {
    let data: Vec<f32> = values.iter().map(|v| v.0).collect();
    let labels = values.iter().map(|v| v.1).collect();
    Dataset::new(Tensor::new(vec![values.len(), 1, 1, 1], data).unwrap(), labels, classes).unwrap()
}

fn blobs() -> Dataset {
    synthetic_blobs(&SyntheticSpec { samples: 200, ..Default::default() }).unwrap()
}

#[test]
fn dataset_checks_labels_and_counts() {
    let t = Tensor::zeros(&[3, 1, 2, 2]);
    assert!(Dataset::new(t.clone(), vec![0, 1], 2).is_err());
    assert_eq!(
        Dataset::new(t.clone(), vec![0, 1, 2], 2).unwrap_err(),
        Error::LabelOutOfRange { label: 2, classes: 2 }
    );
    assert!(Dataset::new(t, vec![0, 1, 1], 2).is_ok());
}

#[test]
fn random_full_size_is_a_permutation() {
    let ds = blobs();
    let spec = SamplingSpec { batch_size: ds.len(), seed: 3, ..Default::default() };
    let mut idx = sample_indices(&ds, &spec).unwrap().unwrap();
    assert_ne!(idx, (0..ds.len()).collect::<Vec<_>>());
    idx.sort_unstable();
    assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
}

#[test]
fn random_batches_are_seeded() {
    let ds = blobs();
    let spec = SamplingSpec { batch_size: 60, seed: 11, ..Default::default() };
    let a = sample_batch(&ds, &spec).unwrap();
    assert_eq!(a, sample_batch(&ds, &spec).unwrap());
    assert_ne!(a, sample_batch(&ds, &SamplingSpec { seed: 12, ..spec }).unwrap());
    let idx = sample_indices(&ds, &spec).unwrap().unwrap();
    let mut d = idx.clone();
    d.sort_unstable();
    d.dedup();
    assert_eq!(d.len(), 60);
    assert!(sample_batch(&ds, &SamplingSpec { batch_size: 201, ..spec }).is_err());
}

#[test]
fn stratified_batches_hold_k_per_class() {
    let ds = blobs();
    let spec = SamplingSpec { strategy: Strategy::KmeansStratified, batch_size: 24, per_class_k: 6, seed: 1 };
    let idx = sample_indices(&ds, &spec).unwrap().unwrap();
    assert_eq!(idx.len(), 24);
    for class in 0..4 {
        assert_eq!(idx.iter().filter(|&&i| ds.labels()[i] == class).count(), 6);
    }
    assert_eq!(idx, sample_indices(&ds, &spec).unwrap().unwrap());
    let bad = SamplingSpec { batch_size: 25, ..spec };
    assert!(matches!(sample_indices(&ds, &bad), Err(Error::Sampling(_))));
}

#[test]
fn small_class_is_rejected() {
    let ds = tiny(&[(0.0, 0), (1.0, 0), (2.0, 1)], 2);
    let spec = SamplingSpec { strategy: Strategy::KmeansStratified, batch_size: 4, per_class_k: 2, seed: 0 };
    assert!(matches!(sample_indices(&ds, &spec), Err(Error::Sampling(_))));
}

#[test]
fn degenerate_cluster_returns_the_repeated_sample() {
    let ds = tiny(&[(0.7, 0), (0.7, 0), (0.7, 0), (5.0, 1)], 2);
    let spec = SamplingSpec { strategy: Strategy::KmeansStratified, batch_size: 2, per_class_k: 1, seed: 0 };
    let b = sample_batch(&ds, &spec).unwrap();
    assert_eq!(b.data(), &[0.7, 5.0]);
}

/// Best 2-partition by exhaustive enumeration.
fn exhaustive_two_means(points: &[[f64; 2]]) -> (f64, [usize; 2]) {
    let n = points.len();
    let mut best = (f64::INFINITY, [0, 0]);
    for mask in 1u32..(1 << n) - 1 {
        let mut cen = [[0.0; 2]; 2];
        let mut cnt = [0.0; 2];
        for (i, p) in points.iter().enumerate() {
            let c = (mask >> i & 1) as usize;
            cnt[c] += 1.0;
            cen[c][0] += p[0];
            cen[c][1] += p[1];
        }
        for c in 0..2 {
            cen[c][0] /= cnt[c];
            cen[c][1] /= cnt[c];
        }
        let d = |p: &[f64; 2], c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        let obj: f64 = points.iter().enumerate().map(|(i, p)| d(p, &cen[(mask >> i & 1) as usize])).sum();
        if obj < best.0 - 1e-12 {
            let near = |c: &[f64; 2]| {
                (0..n).min_by(|&a, &b| d(&points[a], c).partial_cmp(&d(&points[b], c)).unwrap()).unwrap()
            };
            let mut reps = [near(&cen[0]), near(&cen[1])];
            reps.sort_unstable();
            best = (obj, reps);
        }
    }
    best
}

#[test]
fn two_cluster_class_matches_exhaustive_oracle() {
    let mut rng = seeded(21);
    for trial in 0..10 {
        let n = 8 + trial % 8;
        let points: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let off = if i % 2 == 0 { 0.0 } else { 10.0 };
                [off + rng.gen_range(-1.0..1.0), off + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        let fit = kmeans(&flat, 2, 2, trial as u64, 100).unwrap();
        let (obj, reps) = exhaustive_two_means(&points);
        assert!((fit.trace.last().unwrap() - obj).abs() < 1e-9);
        let mut got = fit.representatives.clone();
        got.sort_unstable();
        assert_eq!(got, reps.to_vec());
    }
}

#[test]
fn kmeans_objective_never_increases() {
    let ds = blobs();
    let row = ds.samples().row_len();
    let pts: Vec<f64> = ds.samples().data().iter().map(|&v| f64::from(v)).collect();
    for k in [2, 5, 9] {
        let fit = kmeans(&pts, row, k, k as u64, 100).unwrap();
        assert!(fit.trace.len() <= 100);
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0], "{} > {}", w[1], w[0]);
        }
        let mut reps = fit.representatives.clone();
        reps.sort_unstable();
        reps.dedup();
        assert_eq!(reps.len(), k);
    }
}

#[test]
fn noise_stays_in_data_range() {
    let ds = blobs();
    let (lo, hi) = ds.value_range();
    let spec = SamplingSpec { strategy: Strategy::Noise, batch_size: 10, seed: 4, ..Default::default() };
    let b = sample_batch(&ds, &spec).unwrap();
    assert_eq!(b.shape(), &[10, 3, 8, 8]);
    assert!(b.data().iter().all(|&v| (lo..=hi).contains(&v)));
    assert_eq!(b, sample_batch(&ds, &spec).unwrap());
}

#[test]
fn full_reference_is_canonical() {
    let ds = blobs();
    let full = full_dataset_reference(&ds);
    assert_eq!(full.shape()[0], 200);
    assert_eq!(&full, ds.samples());
    let spec = SamplingSpec { strategy: Strategy::Full, batch_size: 0, ..Default::default() };
    assert_eq!(sample_batch(&ds, &spec).unwrap(), full);
}

#[test]
fn split_partitions_the_dataset() {
    let ds = blobs();
    let (train, test) = ds.split(0.25, 2).unwrap();
    assert_eq!(test.len(), 50);
    assert_eq!(train.len() + test.len(), ds.len());
    assert!(ds.split(0.0, 2).is_err());
}

#[test]
fn synthetic_generator_is_seeded_and_balanced() {
    let spec = SyntheticSpec { classes: 5, samples: 100, seed: 9, ..Default::default() };
    let a = synthetic_blobs(&spec).unwrap();
    assert_eq!(a, synthetic_blobs(&spec).unwrap());
    assert_eq!(a.classes(), 5);
    for c in 0..5 {
        assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 20);
    }
    assert!(a.samples().is_finite());
}
