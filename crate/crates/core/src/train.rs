//! Mini-batch SGD training and evaluation.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::{
    backward, cross_entropy_loss, forward, sgd_step, update_running_stats, BnMode, ForwardOptions,
};
use crate::graph::{Network, WeightState};
use crate::rng::seeded;
use crate::sampling::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { every, gamma } => {
                let k = epoch.checked_div(every).unwrap_or(0);
                (0..k).fold(self.lr, |lr, _| lr * gamma)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub loss: Vec<f64>,
    /// Training-batch accuracy per epoch.
    pub accuracy: Vec<f64>,
}

fn correct(logits: &crate::Tensor, labels: &[usize]) -> usize {
    let k = logits.row_len();
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == l
        })
        .count()
}

/// Trains in place. Batch-norm layers use batch statistics and fold them
/// into their running averages; batches of one sample are skipped. With
/// zero epochs the network is left untouched.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch = data.samples().gather_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let pass = forward(net, &batch, &ForwardOptions::train())?;
            let (loss, grad) = cross_entropy_loss(pass.output(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    node: alloc::string::String::from("loss"),
                });
            }
            hits += correct(pass.output(), &labels);
            seen += idx.len();
            loss_sum += loss * idx.len() as f64;
            let grads = backward(net, &pass, &grad)?;
            update_running_stats(net, &pass);
            sgd_step(net, &grads, lr)?;
        }
        log.loss.push(loss_sum / seen.max(1) as f64);
        log.accuracy.push(hits as f64 / seen.max(1) as f64);
    }
    net.state = WeightState::Trained;
    Ok(log)
}

/// Top-1 accuracy in inference mode, evaluated in chunks of `batch_size`.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mode = BnMode::for_inference(net);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for idx in all.chunks(batch_size.max(2)) {
        let batch = data.samples().gather_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let pass = forward(net, &batch, &ForwardOptions::inference(mode))?;
        hits += correct(pass.output(), &labels);
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_initialized, Arch};
    use crate::graph::{Builder, Source};
    use crate::sampling::{synthetic_blobs, SyntheticSpec};
    use crate::Tensor;
    use alloc::vec;
    use rand::Rng;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig {
            lr: 1.0,
            schedule: LrSchedule::Step { every: 2, gamma: 0.5 },
            ..Default::default()
        };
        let got: Vec<f32> = (0..5).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(got, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn zero_epochs_leave_the_network_alone() {
        let ds = synthetic_blobs(&SyntheticSpec { samples: 40, ..Default::default() }).unwrap();
        let mut net = build_initialized(Arch::PlainCnn, [3, 8, 8], 4, 1).unwrap();
        let before = net.clone();
        train(&mut net, &ds, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn two_layer_net_loss_falls_on_separable_data() {
        let mut rng = seeded(3);
        let n = 64;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            for _ in 0..4 {
                data.push(sign + rng.gen_range(-0.5f32..0.5));
            }
            labels.push(label);
        }
        let ds = Dataset::new(Tensor::new(vec![n, 4, 1, 1], data).unwrap(), labels, 2).unwrap();
        let mut b = Builder::new([4, 1, 1]);
        let c = b.conv(Source::Input, 4, 8, 1, 1, 0);
        let r = b.relu(c);
        let f = b.flatten(r);
        b.linear(f, 8, 2);
        let mut net = b.finish().unwrap();
        crate::arch::init_weights(&mut net, 2);
        let cfg = TrainConfig { epochs: 50, batch_size: 64, lr: 0.1, ..Default::default() };
        let log = train(&mut net, &ds, &cfg).unwrap();
        assert_eq!(log.loss.len(), 50);
        assert!(log.loss[49] < log.loss[0] * 0.5, "{:?}", log.loss);
        assert!(evaluate(&net, &ds, 16).unwrap() > 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synthetic_blobs(&SyntheticSpec { samples: 64, ..Default::default() }).unwrap();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let mut a = build_initialized(Arch::Resnet, [3, 8, 8], 4, 4).unwrap();
        let mut b = a.clone();
        train(&mut a, &ds, &cfg).unwrap();
        train(&mut b, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.state, WeightState::Trained);
    }
}
