//! Datasets and scoring-batch assembly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{normal, seeded};
use crate::{Error, Result, Tensor};

/// Labeled image stack of shape `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset samples must be (N, C, H, W), got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            samples: self.samples.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Seeded random split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(seed));
        let n_test = libm::round(test_fraction * self.len() as f64) as usize;
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::Sampling(format!(
                "test fraction {test_fraction} leaves an empty split"
            )));
        }
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Smallest and largest pixel value.
    pub fn value_range(&self) -> (f32, f32) {
        let d = self.samples.data();
        let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        (lo, hi)
    }

    fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Random,
    /// Per-class k-means representatives.
    #[serde(alias = "kmeans")]
    KmeansStratified,
    /// Uniform noise over the dataset's value range (not drawn from data).
    Noise,
    /// The whole dataset in canonical order.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Representatives per class; k-means only.
    pub per_class_k: usize,
    pub seed: u64,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            batch_size: 60,
            per_class_k: 6,
            seed: 0,
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.strategy == Strategy::KmeansStratified && self.per_class_k * classes != self.batch_size {
            return Err(Error::Sampling(format!(
                "per_class_k {} × {} classes != batch size {}",
                self.per_class_k, classes, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Dataset rows picked by `spec`; `None` for the noise strategy.
pub fn sample_indices(ds: &Dataset, spec: &SamplingSpec) -> Result<Option<Vec<usize>>> {
    spec.validate(ds.classes())?;
    match spec.strategy {
        Strategy::Random => {
            if spec.batch_size > ds.len() {
                return Err(Error::Sampling(format!(
                    "batch of {} from {} samples",
                    spec.batch_size,
                    ds.len()
                )));
            }
            let mut rng = seeded(spec.seed);
            Ok(Some(rand::seq::index::sample(&mut rng, ds.len(), spec.batch_size).into_vec()))
        }
        Strategy::KmeansStratified => {
            let row = ds.samples().row_len();
            let mut out = Vec::with_capacity(spec.batch_size);
            for class in 0..ds.classes() {
                let members = ds.class_members(class);
                if members.len() < spec.per_class_k {
                    return Err(Error::Sampling(format!(
                        "class {class} has {} samples, {} requested",
                        members.len(),
                        spec.per_class_k
                    )));
                }
                let points: Vec<f64> = members
                    .iter()
                    .flat_map(|&i| ds.samples().row(i).iter().map(|&v| f64::from(v)))
                    .collect();
                let fit = kmeans(&points, row, spec.per_class_k, spec.seed ^ class as u64, 100)?;
                let mut picked: Vec<usize> = fit.representatives.iter().map(|&r| members[r]).collect();
                picked.sort_unstable();
                out.extend(picked);
            }
            Ok(Some(out))
        }
        Strategy::Noise => Ok(None),
        Strategy::Full => Ok(Some((0..ds.len()).collect())),
    }
}

pub fn sample_batch(ds: &Dataset, spec: &SamplingSpec) -> Result<Tensor> {
    match sample_indices(ds, spec)? {
        Some(idx) => ds.samples().gather_rows(&idx),
        None => {
            let (lo, hi) = ds.value_range();
            let [c, h, w] = ds.sample_shape();
            let mut rng = seeded(spec.seed);
            let n = spec.batch_size * c * h * w;
            let data = (0..n)
                .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                .collect();
            Tensor::new(vec![spec.batch_size, c, h, w], data)
        }
    }
}

/// The whole dataset as one batch, for reference maps.
pub fn full_dataset_reference(ds: &Dataset) -> Tensor {
    ds.samples().clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Objective (sum of squared distances) after each assignment step.
    pub trace: Vec<f64>,
    /// Index of the distinct point nearest each centroid.
    pub representatives: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding over `points` (`n × dim`,
/// row-major). Empty clusters keep their previous centroid.
#[allow(clippy::needless_range_loop)]
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Sampling("point buffer is not a whole number of rows".into()));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Sampling(format!("cannot form {k} clusters from {n} points")));
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = seeded(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(pt(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(pt(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &centroids[start..start + dim]));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(pt(i), &centroids[c * dim..(c + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            objective += d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }

    let mut taken = vec![false; n];
    let mut representatives = Vec::with_capacity(k);
    for c in 0..k {
        let cen = &centroids[c * dim..(c + 1) * dim];
        let best = (0..n)
            .filter(|&i| !taken[i])
            .map(|i| (i, sq_dist(pt(i), cen)))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
            .0;
        taken[best] = true;
        representatives.push(best);
    }
    Ok(KMeans {
        centroids,
        assignment,
        trace,
        representatives,
    })
}

/// Gaussian-blob image classes: each class places a few soft blobs of its
/// own colour and position; samples jitter the blobs and add pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub shape: [usize; 3],
    pub blobs_per_class: usize,
    /// Blob width in pixels.
    pub sigma: f32,
    /// Maximum blob-center shift per sample, in pixels.
    pub jitter: f32,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 2000,
            shape: [3, 8, 8],
            blobs_per_class: 2,
            sigma: 1.5,
            jitter: 1.5,
            noise: 0.25,
            seed: 0,
        }
    }
}

struct Blob {
    y: f32,
    x: f32,
    colour: Vec<f32>,
}

/// Generates `spec.samples` images; sample `i` has label `i mod classes`.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    if spec.classes < 2 || spec.samples == 0 || c * h * w == 0 {
        return Err(Error::Config("synthetic dataset needs ≥ 2 classes and non-empty images".into()));
    }
    let mut rng = seeded(spec.seed);
    let protos: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs_per_class)
                .map(|_| Blob {
                    y: rng.gen_range(0.0..h as f32),
                    x: rng.gen_range(0.0..w as f32),
                    colour: (0..c).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(spec.samples * c * h * w);
    let mut labels = Vec::with_capacity(spec.samples);
    let two_s2 = 2.0 * spec.sigma * spec.sigma;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        labels.push(label);
        let shifted: Vec<(f32, f32, f32)> = protos[label]
            .iter()
            .map(|b| {
                let dy = rng.gen_range(-1.0f32..=1.0) * spec.jitter;
                let dx = rng.gen_range(-1.0f32..=1.0) * spec.jitter;
                (b.y + dy, b.x + dx, rng.gen_range(0.6f32..1.4))
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0f32;
                    for (b, &(by, bx, amp)) in protos[label].iter().zip(&shifted) {
                        let (ry, rx) = (y as f32 - by, x as f32 - bx);
                        let r2 = ry * ry + rx * rx;
                        v += amp * b.colour[ch] * libm::expf(-r2 / two_s2);
                    }
                    data.push(v + spec.noise * normal(&mut rng));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![spec.samples, c, h, w], data)?, labels, spec.classes)
}

#[cfg(test)]
mod tests;
