use super::*;
use crate::graph::Builder;
use crate::layer::{Conv2d, Linear};
use crate::rng::{normal, seeded, SeededRng};
use rand::Rng;
use std::vec::Vec as StdVec;

fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

fn randomize(net: &mut Network, rng: &mut SeededRng) {
    for node in &mut net.nodes {
        for p in node.layer.params_mut() {
            for v in p.data_mut() {
                *v = normal(rng) * 0.5;
            }
        }
        if let Layer::BatchNorm2d(bn) = &mut node.layer {
            for v in bn.gamma.data_mut() {
                *v = 1.0 + 0.3 * normal(rng);
            }
            for v in bn.running_mean.data_mut() {
                *v = 0.2 * normal(rng);
            }
            for v in bn.running_var.data_mut() {
                *v = 0.5 + rng.gen::<f32>();
            }
        }
    }
}

/// Direct transcription of the convolution sum, one output at a time.
fn naive_conv(conv: &Conv2d, x: &Tensor) -> StdVec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = conv.output_hw(h, w).unwrap();
    let (m, kn) = conv.kernel;
    let mut out = StdVec::new();
    for s in 0..n {
        for o in 0..conv.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[o]));
                    for ic in 0..c {
                        for ky in 0..m {
                            for kx in 0..kn {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = conv.weight.data()[((o * c + ic) * m + ky) * kn + kx];
                                let xv = x.data()[((s * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += f64::from(wv) * f64::from(xv);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn single_conv_net(conv: Conv2d, hw: (usize, usize)) -> Network {
    let (ho, wo) = conv.output_hw(hw.0, hw.1).unwrap();
    let (ic, oc) = (conv.in_channels, conv.out_channels);
    let mut net = Network::new([ic, hw.0, hw.1]);
    let c = net.push("conv", Layer::Conv2d(conv), vec![Source::Input]);
    let f = net.push("flat", Layer::Flatten, vec![c]);
    net.push(
        "fc",
        Layer::Linear(Linear::zeroed(oc * ho * wo, 1, false)),
        vec![f],
    );
    net
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = seeded(11);
    for trial in 0..40 {
        let ic = rng.gen_range(1..4);
        let oc = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..2);
        let h = rng.gen_range(k..7);
        let w = rng.gen_range(k..7);
        let mut conv = Conv2d::zeroed(ic, oc, k, stride, padding, trial % 2 == 0);
        conv.weight = random_tensor(&mut rng, conv.weight.shape());
        if let Some(b) = &mut conv.bias {
            *b = random_tensor(&mut rng, &[oc]);
        }
        let x = random_tensor(&mut rng, &[2, ic, h, w]);
        let (ho, wo) = conv.output_hw(h, w).unwrap();
        let got = kernels::conv_forward(&conv, x.data(), 2, h, w, ho, wo);
        let want = naive_conv(&conv, &x);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-5, "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn three_by_three_conv_on_five_by_five() {
    let mut conv = Conv2d::zeroed(1, 1, 3, 1, 0, true);
    let wv: StdVec<f32> = (0..9).map(|i| i as f32 - 4.0).collect();
    conv.weight = Tensor::new(vec![1, 1, 3, 3], wv).unwrap();
    conv.bias = Some(Tensor::new(vec![1], vec![0.5]).unwrap());
    let x = Tensor::new(vec![1, 1, 5, 5], (0..25).map(|i| i as f32).collect()).unwrap();
    let net = single_conv_net(conv.clone(), (5, 5));
    let pass = forward(
        &net,
        &x,
        &ForwardOptions {
            bn_mode: BnMode::Batch,
            retain: false,
            capture: vec![0],
        },
    )
    .unwrap();
    let y = &pass.captured()[&0];
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    let want = naive_conv(&conv, &x);
    for (g, w) in y.data().iter().zip(&want) {
        assert_eq!(f64::from(*g), *w);
    }
}

#[test]
fn identity_one_by_one_conv_with_relu_is_identity() {
    let mut b = Builder::new([3, 4, 4]);
    let c = b.conv(Source::Input, 3, 3, 1, 1, 0);
    let r = b.relu(c);
    let f = b.flatten(r);
    b.linear(f, 48, 2);
    let mut net = b.finish().unwrap();
    if let Layer::Conv2d(conv) = &mut net.nodes[0].layer {
        for o in 0..3 {
            conv.weight.data_mut()[o * 3 + o] = 1.0;
        }
    }
    let mut rng = seeded(3);
    let x = Tensor::new(
        vec![2, 3, 4, 4],
        (0..96).map(|_| rng.gen_range(0.0f32..2.0)).collect(),
    )
    .unwrap();
    let opts = ForwardOptions {
        bn_mode: BnMode::Batch,
        retain: false,
        capture: vec![1],
    };
    let pass = forward(&net, &x, &opts).unwrap();
    assert_eq!(pass.captured()[&1].data(), x.data());
}

fn toy_net_all_kinds() -> Network {
    let mut b = Builder::new([2, 6, 6]);
    let c1 = b.conv(Source::Input, 2, 3, 3, 1, 1);
    let n1 = b.bn(c1, 3);
    let r1 = b.relu(n1);
    let c2 = b.conv(r1, 3, 3, 3, 1, 1);
    let s = b.add(vec![c2, r1]);
    let p = b.max_pool(s, 2, 2);
    let a = b.avg_pool(p, 3, 3);
    let f = b.flatten(a);
    b.linear(f, 3, 4);
    b.finish().unwrap()
}

#[test]
fn zero_network_captures_zero_patterns() {
    let net = toy_net_all_kinds();
    let mut rng = seeded(5);
    let x = random_tensor(&mut rng, &[4, 2, 6, 6]);
    let points = capture_points(&net);
    let opts = ForwardOptions {
        bn_mode: BnMode::Batch,
        retain: false,
        capture: points.iter().map(|p| p.node).collect(),
    };
    let pass = forward(&net, &x, &opts).unwrap();
    for t in pass.captured().values() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn capture_points_look_through_bn_and_add() {
    let net = toy_net_all_kinds();
    let pts = capture_points(&net);
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[0], CapturePoint { conv: 0, node: 2 });
    // conv2 → add → maxpool: no relu, falls back to the conv output
    assert_eq!(pts[1], CapturePoint { conv: 3, node: 3 });
}

#[test]
fn forward_is_deterministic() {
    let mut net = toy_net_all_kinds();
    let mut rng = seeded(9);
    randomize(&mut net, &mut rng);
    let x = random_tensor(&mut rng, &[5, 2, 6, 6]);
    let opts = ForwardOptions {
        bn_mode: BnMode::Batch,
        retain: true,
        capture: vec![2, 4],
    };
    let a = forward(&net, &x, &opts).unwrap();
    let b = forward(&net, &x, &opts).unwrap();
    assert_eq!(a.output(), b.output());
    assert_eq!(a.captured(), b.captured());
}

#[test]
fn shape_mismatch_and_nonfinite_are_errors() {
    let net = toy_net_all_kinds();
    let bad = Tensor::zeros(&[1, 3, 6, 6]);
    assert!(matches!(
        forward(&net, &bad, &ForwardOptions::train()),
        Err(Error::Shape(_))
    ));
    let mut x = Tensor::zeros(&[1, 2, 6, 6]);
    x.data_mut()[0] = f32::NAN;
    assert!(matches!(
        forward(&net, &x, &ForwardOptions::train()),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn backward_without_retention_is_rejected() {
    let net = toy_net_all_kinds();
    let x = Tensor::zeros(&[1, 2, 6, 6]);
    let pass = forward(&net, &x, &ForwardOptions::inference(BnMode::Batch)).unwrap();
    let g = Tensor::zeros(&[1, 4]);
    assert_eq!(backward(&net, &pass, &g), Err(Error::NoForward));
}

#[test]
fn linear_sum_loss_gradient_is_outer_product() {
    let mut net = Network::new([1, 1, 3]);
    let f = net.push("flat", Layer::Flatten, vec![Source::Input]);
    let mut lin = Linear::zeroed(3, 2, false);
    lin.weight = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
    net.push("fc", Layer::Linear(lin), vec![f]);
    let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, -3.0]).unwrap();
    let pass = forward(&net, &x, &ForwardOptions::train()).unwrap();
    let g = backward(&net, &pass, &Tensor::filled(&[1, 2], 1.0)).unwrap();
    assert_eq!(g.params[1][0].data(), &[1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let mut net = toy_net_all_kinds();
    let mut rng = seeded(2);
    randomize(&mut net, &mut rng);
    let x = random_tensor(&mut rng, &[3, 2, 6, 6]);
    let pass = forward(&net, &x, &ForwardOptions::train()).unwrap();
    let g = backward(&net, &pass, &Tensor::zeros(&[3, 4])).unwrap();
    for t in g.params.iter().flatten() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

/// Loss `Σ r·output` evaluated in f64.
fn probe_loss(net: &Network, x: &Tensor, r: &[f32], mode: BnMode) -> f64 {
    let pass = forward(net, x, &ForwardOptions::inference(mode)).unwrap();
    pass.output()
        .data()
        .iter()
        .zip(r)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A conv bias ahead of batch-statistics normalization has an exactly
    // vanishing gradient; there the f32 difference quotient is pure noise
    // and only the absolute gap is meaningful.
    if na.max(nb) < 1e-3 {
        d
    } else {
        d / na.max(nb)
    }
}

fn gradcheck(net: &Network, x: &Tensor, mode: BnMode, rng: &mut SeededRng) -> f64 {
    let eps = 1e-3f32;
    let out_len = forward(net, x, &ForwardOptions::inference(mode))
        .unwrap()
        .output()
        .len();
    let r: StdVec<f32> = (0..out_len).map(|_| normal(rng)).collect();
    let opts = ForwardOptions {
        bn_mode: mode,
        retain: true,
        capture: vec![],
    };
    let pass = forward(net, x, &opts).unwrap();
    let lg = Tensor::new(pass.output().shape().to_vec(), r.clone()).unwrap();
    let grads = backward(net, &pass, &lg).unwrap();
    let mut worst = 0.0f64;
    for (i, node) in net.nodes.iter().enumerate() {
        for (pi, p) in node.layer.params().iter().enumerate() {
            let analytic: StdVec<f64> = grads.params[i][pi].data().iter().map(|&v| f64::from(v)).collect();
            let mut numeric = StdVec::new();
            for k in 0..p.len() {
                let mut plus = net.clone();
                plus.nodes[i].layer.params_mut()[pi].data_mut()[k] += eps;
                let mut minus = net.clone();
                minus.nodes[i].layer.params_mut()[pi].data_mut()[k] -= eps;
                let d = probe_loss(&plus, x, &r, mode) - probe_loss(&minus, x, &r, mode);
                numeric.push(d / (2.0 * f64::from(eps)));
            }
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    let analytic: StdVec<f64> = grads.input.data().iter().map(|&v| f64::from(v)).collect();
    let mut numeric = StdVec::new();
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += eps;
        let mut xm = x.clone();
        xm.data_mut()[k] -= eps;
        numeric.push((probe_loss(net, &xp, &r, mode) - probe_loss(net, &xm, &r, mode)) / (2.0 * f64::from(eps)));
    }
    worst.max(rel_err(&analytic, &numeric))
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = seeded(17);
    for trial in 0..4 {
        let mut net = toy_net_all_kinds();
        randomize(&mut net, &mut rng);
        let x = random_tensor(&mut rng, &[3, 2, 6, 6]);
        for mode in [BnMode::Batch, BnMode::Running] {
            let e = gradcheck(&net, &x, mode, &mut rng);
            assert!(e < 1e-2, "trial {trial} {mode:?}: relative error {e}");
        }
    }
}

#[test]
fn sgd_step_arithmetic() {
    let mut net = Network::new([1, 1, 1]);
    let f = net.push("flat", Layer::Flatten, vec![Source::Input]);
    let mut lin = Linear::zeroed(1, 1, false);
    lin.weight = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    net.push("fc", Layer::Linear(lin), vec![f]);
    let grads = Gradients {
        params: vec![vec![], vec![Tensor::new(vec![1, 1], vec![2.0]).unwrap()]],
        input: Tensor::zeros(&[1, 1, 1, 1]),
    };
    let before = net.clone();
    sgd_step(&mut net, &grads, 0.0).unwrap();
    assert_eq!(net, before);
    sgd_step(&mut net, &grads, 0.1).unwrap();
    let Layer::Linear(l) = &net.nodes[1].layer else { unreachable!() };
    assert!((l.weight.data()[0] - 0.8).abs() < 1e-7);

    let bad = Gradients {
        params: vec![vec![], vec![Tensor::zeros(&[2, 1])]],
        input: Tensor::zeros(&[1, 1, 1, 1]),
    };
    assert!(matches!(sgd_step(&mut net, &bad, 0.1), Err(Error::Shape(_))));
}

#[test]
fn cross_entropy_reference_values() {
    let logits = Tensor::zeros(&[3, 5]);
    let (loss, _) = cross_entropy_loss(&logits, &[0, 2, 4]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);

    let logits = Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
    let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
    assert!(loss < 1e-30);

    assert_eq!(
        cross_entropy_loss(&logits, &[3]).unwrap_err(),
        Error::LabelOutOfRange { label: 3, classes: 3 }
    );
    assert!(cross_entropy_loss(&logits, &[0, 1]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = seeded(23);
    for _ in 0..10 {
        let logits = random_tensor(&mut rng, &[4, 6]);
        let labels: StdVec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let eps = 1e-2f32;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += eps;
            let mut m = logits.clone();
            m.data_mut()[k] -= eps;
            let lp = cross_entropy_loss(&p, &labels).unwrap().0;
            let lm = cross_entropy_loss(&m, &labels).unwrap().0;
            let h = f64::from(p.data()[k]) - f64::from(m.data()[k]);
            let fd = (lp - lm) / h;
            assert!((fd - f64::from(grad.data()[k])).abs() < 1e-4, "{fd} vs {}", grad.data()[k]);
        }
    }
}

#[test]
fn running_stats_track_batch_statistics() {
    let mut b = Builder::new([1, 2, 2]);
    let n = b.bn(Source::Input, 1);
    let f = b.flatten(n);
    b.linear(f, 4, 1);
    let mut net = b.finish().unwrap();
    let x = Tensor::new(vec![2, 1, 2, 2], vec![1., 1., 1., 1., 3., 3., 3., 3.]).unwrap();
    let pass = forward(&net, &x, &ForwardOptions::train()).unwrap();
    assert_eq!(pass.bn_batch_stats(0).unwrap(), (&[2.0f32][..], &[1.0f32][..]));
    update_running_stats(&mut net, &pass);
    let Layer::BatchNorm2d(bn) = &net.nodes[0].layer else { unreachable!() };
    assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-6);
    // unbiased: 1·8/7
    assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 8.0 / 7.0)).abs() < 1e-6);
}
