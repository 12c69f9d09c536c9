//! Forward and backward passes, softmax cross-entropy and plain SGD.

mod kernels;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::graph::{ActShape, Network, Source};
use crate::layer::{BatchNorm2d, Layer};
use crate::{Error, Result, Tensor};

/// How batch-norm layers normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the current batch (training, and untrained networks).
    Batch,
    /// Stored running statistics (inference on trained networks).
    Running,
}

impl BnMode {
    /// Inference mode appropriate for the network's weight state.
    pub fn for_inference(net: &Network) -> Self {
        match net.state {
            crate::graph::WeightState::Init => BnMode::Batch,
            crate::graph::WeightState::Trained => BnMode::Running,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    /// Keep every intermediate needed by [`backward`].
    pub retain: bool,
    /// Node indices whose outputs are returned in [`ForwardPass::captured`].
    pub capture: Vec<usize>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            bn_mode: BnMode::Batch,
            retain: true,
            capture: Vec::new(),
        }
    }

    pub fn inference(bn_mode: BnMode) -> Self {
        Self {
            bn_mode,
            retain: false,
            capture: Vec::new(),
        }
    }
}

/// Where a conv's filters are observed: the output of the first
/// nonlinearity downstream of the conv, looking through batch-norm and
/// residual adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub conv: usize,
    pub node: usize,
}

/// Capture point for every conv, in node order.
pub fn capture_points(net: &Network) -> Vec<CapturePoint> {
    let consumers = net.consumers();
    net.conv_nodes()
        .map(|conv| {
            let mut at = conv;
            loop {
                let next = &consumers[at];
                if next.len() != 1 {
                    break;
                }
                let n = next[0];
                match net.nodes[n].layer {
                    Layer::Relu => {
                        at = n;
                        break;
                    }
                    Layer::BatchNorm2d(_) | Layer::Add => at = n,
                    _ => break,
                }
            }
            // without a downstream relu the conv output itself is observed
            if !matches!(net.nodes[at].layer, Layer::Relu) {
                at = conv;
            }
            CapturePoint { conv, node: at }
        })
        .collect()
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Bn {
        mean: Vec<f32>,
        var: Vec<f32>,
        inv_std: Vec<f32>,
        xhat: Vec<f32>,
    },
    MaxArg(Vec<u32>),
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    output: Tensor,
    captured: BTreeMap<usize, Tensor>,
    retained: Option<Retained>,
}

#[derive(Debug, Clone)]
struct Retained {
    input: Tensor,
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
    bn_mode: BnMode,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }

    /// Captured node outputs keyed by node index.
    pub fn captured(&self) -> &BTreeMap<usize, Tensor> {
        &self.captured
    }

    pub fn into_captured(self) -> BTreeMap<usize, Tensor> {
        self.captured
    }

    /// Batch mean and biased variance of a batch-norm node, when the pass
    /// ran in [`BnMode::Batch`] with retention.
    pub fn bn_batch_stats(&self, node: usize) -> Option<(&[f32], &[f32])> {
        match self.retained.as_ref()?.aux.get(node)? {
            Aux::Bn { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }
}

fn batch_dims(x: &Tensor, shape: ActShape) -> Result<usize> {
    let dims = shape.dims();
    if x.shape().len() != dims.len() + 1 || x.shape()[1..] != dims[..] {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match per-sample {:?}",
            x.shape(),
            dims
        )));
    }
    Ok(x.shape()[0])
}

fn tensor(n: usize, shape: ActShape, data: Vec<f32>) -> Tensor {
    let mut dims = vec![n];
    dims.extend(shape.dims());
    Tensor::new(dims, data).expect("kernel produced a consistent buffer")
}

fn map_dims(shape: ActShape) -> (usize, usize, usize) {
    match shape {
        ActShape::Map { c, h, w } => (c, h, w),
        ActShape::Flat(f) => (f, 1, 1),
    }
}

fn bn_forward(
    bn: &BatchNorm2d,
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    mode: BnMode,
) -> (Vec<f32>, Aux) {
    let c = bn.channels;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    match mode {
        BnMode::Batch => {
            for ch in 0..c {
                let mut s = 0.0f64;
                for smp in 0..n {
                    let base = (smp * c + ch) * hw;
                    s += x[base..base + hw].iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                let mu = s / m;
                let mut q = 0.0f64;
                for smp in 0..n {
                    let base = (smp * c + ch) * hw;
                    q += x[base..base + hw]
                        .iter()
                        .map(|&v| {
                            let d = f64::from(v) - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (q / m) as f32;
            }
        }
        BnMode::Running => {
            mean.copy_from_slice(bn.running_mean.data());
            var.copy_from_slice(bn.running_var.data());
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| 1.0 / libm::sqrtf(v + bn.eps))
        .collect();
    let gamma = bn.gamma.data();
    let beta = bn.beta.data();
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for smp in 0..n {
        for ch in 0..c {
            let base = (smp * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        y,
        Aux::Bn {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

/// Runs the network on a batch `(N, C, H, W)`.
pub fn forward(net: &Network, batch: &Tensor, opts: &ForwardOptions) -> Result<ForwardPass> {
    let shapes = net.shapes()?;
    let n = batch_dims(batch, net.input_act_shape())?;
    if !batch.is_finite() {
        return Err(Error::NonFinite {
            node: "input".into(),
        });
    }
    for &c in &opts.capture {
        if c >= net.nodes.len() {
            return Err(Error::Shape(format!("capture point {c} is not a node")));
        }
    }

    // last reader of each node, to free buffers early when not retaining
    let mut last_use = vec![usize::MAX; net.nodes.len()];
    for (i, node) in net.nodes.iter().enumerate() {
        for src in &node.inputs {
            if let Source::Node(j) = *src {
                last_use[j] = i;
            }
        }
    }

    let mut outs: Vec<Option<Tensor>> = vec![None; net.nodes.len()];
    let mut aux: Vec<Aux> = Vec::with_capacity(if opts.retain { net.nodes.len() } else { 0 });
    let mut captured = BTreeMap::new();

    for (i, node) in net.nodes.iter().enumerate() {
        let input_of = |k: usize| -> (&Tensor, ActShape) {
            match node.inputs[k] {
                Source::Input => (batch, net.input_act_shape()),
                Source::Node(j) => (
                    outs[j].as_ref().expect("producer output is alive"),
                    shapes[j],
                ),
            }
        };
        let (x, xs) = input_of(0);
        let out_shape = shapes[i];
        let (c, h, w) = map_dims(xs);
        let (_, ho, wo) = map_dims(out_shape);
        let mut node_aux = Aux::None;
        let y = match &node.layer {
            Layer::Conv2d(conv) => kernels::conv_forward(conv, x.data(), n, h, w, ho, wo),
            Layer::BatchNorm2d(bn) => {
                let (y, a) = bn_forward(bn, x.data(), n, h, w, opts.bn_mode);
                node_aux = a;
                y
            }
            Layer::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool2d(p) => {
                let (y, arg) = kernels::max_pool_forward(*p, x.data(), n, c, h, w, ho, wo);
                node_aux = Aux::MaxArg(arg);
                y
            }
            Layer::AvgPool2d(p) => kernels::avg_pool_forward(*p, x.data(), n, c, h, w, ho, wo),
            Layer::Linear(l) => kernels::linear_forward(
                x.data(),
                l.weight.data(),
                l.bias.as_ref().map(|b| b.data()),
                n,
                l.in_features,
                l.out_features,
            ),
            Layer::Flatten => x.data().to_vec(),
            Layer::Add => {
                let mut acc = x.data().to_vec();
                for k in 1..node.inputs.len() {
                    for (a, b) in acc.iter_mut().zip(input_of(k).0.data()) {
                        *a += *b;
                    }
                }
                acc
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: node.name.clone(),
            });
        }
        let t = tensor(n, out_shape, y);
        if opts.capture.contains(&i) {
            captured.insert(i, t.clone());
        }
        outs[i] = Some(t);
        if opts.retain {
            aux.push(node_aux);
        } else {
            for src in &node.inputs {
                if let Source::Node(j) = *src {
                    if last_use[j] == i {
                        outs[j] = None;
                    }
                }
            }
        }
    }

    let output = outs[net.output_node()].clone().expect("output computed");
    let retained = opts.retain.then(|| Retained {
        input: batch.clone(),
        outputs: outs.into_iter().map(|o| o.expect("retained")).collect(),
        aux,
        bn_mode: opts.bn_mode,
    });
    Ok(ForwardPass {
        output,
        captured,
        retained,
    })
}

/// Per-node parameter gradients, in [`Layer::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<Tensor>>,
    /// Gradient with respect to the network input batch.
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(net: &Network, input_shape: &[usize]) -> Self {
        Self {
            params: net
                .nodes
                .iter()
                .map(|n| n.layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
            input: Tensor::zeros(input_shape),
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Back-propagates `loss_grad` (d loss / d output) through a retained pass.
pub fn backward(net: &Network, pass: &ForwardPass, loss_grad: &Tensor) -> Result<Gradients> {
    let ret = pass.retained.as_ref().ok_or(Error::NoForward)?;
    if ret.outputs.len() != net.nodes.len() {
        return Err(Error::NoForward);
    }
    if loss_grad.shape() != pass.output.shape() {
        return Err(Error::Shape(format!(
            "loss gradient {:?} vs output {:?}",
            loss_grad.shape(),
            pass.output.shape()
        )));
    }
    let shapes = net.shapes()?;
    let n = ret.input.shape()[0];
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; net.nodes.len()];
    let mut input_grad: Option<Vec<f32>> = None;
    grads[net.output_node()] = Some(loss_grad.data().to_vec());
    let mut params: Vec<Vec<Tensor>> = vec![Vec::new(); net.nodes.len()];

    for i in (0..net.nodes.len()).rev() {
        let node = &net.nodes[i];
        let dy = match grads[i].take() {
            Some(g) => g,
            None => vec![0.0; ret.outputs[i].len()],
        };
        let src_data = |k: usize| -> (&[f32], ActShape) {
            match node.inputs[k] {
                Source::Input => (ret.input.data(), net.input_act_shape()),
                Source::Node(j) => (ret.outputs[j].data(), shapes[j]),
            }
        };
        let (x, xs) = src_data(0);
        let (c, h, w) = map_dims(xs);
        let (_, ho, wo) = map_dims(shapes[i]);
        let mut dxs: Vec<Vec<f32>> = Vec::new();
        match &node.layer {
            Layer::Conv2d(conv) => {
                let (dx, dw, db) = kernels::conv_backward(conv, x, &dy, n, h, w, ho, wo);
                let mut g = vec![Tensor::new(conv.weight.shape().to_vec(), dw)?];
                if conv.bias.is_some() {
                    g.push(Tensor::new(vec![conv.out_channels], db)?);
                }
                params[i] = g;
                dxs.push(dx);
            }
            Layer::BatchNorm2d(bn) => {
                let Aux::Bn { inv_std, xhat, .. } = &ret.aux[i] else {
                    return Err(Error::NoForward);
                };
                let hw = h * w;
                let m = (n * hw) as f32;
                let gamma = bn.gamma.data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += dy[k] * xhat[k];
                            dbeta[ch] += dy[k];
                        }
                    }
                }
                let mut dx = vec![0.0f32; dy.len()];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * hw;
                        let scale = gamma[ch] * inv_std[ch];
                        for k in base..base + hw {
                            dx[k] = match ret.bn_mode {
                                BnMode::Batch => {
                                    scale / m * (m * dy[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                }
                                BnMode::Running => scale * dy[k],
                            };
                        }
                    }
                }
                params[i] = vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?];
                dxs.push(dx);
            }
            Layer::Relu => {
                let y = ret.outputs[i].data();
                dxs.push(
                    dy.iter()
                        .zip(y)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            Layer::MaxPool2d(_) => {
                let Aux::MaxArg(arg) = &ret.aux[i] else {
                    return Err(Error::NoForward);
                };
                let mut dx = vec![0.0f32; x.len()];
                for (g, &a) in dy.iter().zip(arg) {
                    dx[a as usize] += *g;
                }
                dxs.push(dx);
            }
            Layer::AvgPool2d(p) => {
                dxs.push(kernels::avg_pool_backward(*p, &dy, n, c, h, w, ho, wo));
            }
            Layer::Linear(l) => {
                let (dx, dw, db) = kernels::linear_backward(
                    x,
                    l.weight.data(),
                    &dy,
                    n,
                    l.in_features,
                    l.out_features,
                );
                let mut g = vec![Tensor::new(l.weight.shape().to_vec(), dw)?];
                if l.bias.is_some() {
                    g.push(Tensor::new(vec![l.out_features], db)?);
                }
                params[i] = g;
                dxs.push(dx);
            }
            Layer::Flatten => dxs.push(dy),
            Layer::Add => {
                for _ in 1..node.inputs.len() {
                    dxs.push(dy.clone());
                }
                dxs.push(dy);
            }
        }
        for (k, dx) in dxs.into_iter().enumerate() {
            match node.inputs[k] {
                Source::Input => accumulate(&mut input_grad, dx),
                Source::Node(j) => accumulate(&mut grads[j], dx),
            }
        }
    }
    let input = match input_grad {
        Some(g) => Tensor::new(ret.input.shape().to_vec(), g)?,
        None => Tensor::zeros(ret.input.shape()),
    };
    Ok(Gradients { params, input })
}

/// `p ← p − lr·∇p` for every learnable parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f32) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    if grads.params.len() != net.nodes.len() {
        return Err(Error::Shape("gradients do not match the network".into()));
    }
    for (node, g) in net.nodes.iter().zip(&grads.params) {
        let ps = node.layer.params();
        if ps.len() != g.len() || ps.iter().zip(g).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::Shape(format!(
                "gradient shapes for `{}` do not match its parameters",
                node.name
            )));
        }
    }
    for (node, g) in net.nodes.iter_mut().zip(&grads.params) {
        for (p, g) in node.layer.params_mut().into_iter().zip(g) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(())
}

/// Folds the batch statistics of a training pass into the running averages.
pub fn update_running_stats(net: &mut Network, pass: &ForwardPass) {
    let Some(ret) = pass.retained.as_ref() else {
        return;
    };
    if ret.bn_mode != BnMode::Batch {
        return;
    }
    let n = ret.input.shape()[0];
    let shapes = match net.shapes() {
        Ok(s) => s,
        Err(_) => return,
    };
    for (i, node) in net.nodes.iter_mut().enumerate() {
        if let (Layer::BatchNorm2d(bn), Some(Aux::Bn { mean, var, .. })) =
            (&mut node.layer, ret.aux.get(i))
        {
            let (_, h, w) = map_dims(shapes[i]);
            let m = (n * h * w) as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = bn.momentum;
            for (r, &v) in bn.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - mom) * *r + mom * v;
            }
            for (r, &v) in bn.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let z: f64 = row.iter().map(|&v| libm::exp(f64::from(v) - max)).sum();
        let log_z = max + libm::log(z);
        total += log_z - f64::from(row[label]);
        for (j, &v) in row.iter().enumerate() {
            let p = libm::exp(f64::from(v) - log_z);
            let t = if j == label { 1.0 } else { 0.0 };
            grad[s * k + j] = ((p - t) / n as f64) as f32;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

#[cfg(test)]
mod tests;
