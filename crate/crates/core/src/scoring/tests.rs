use super::*;
use crate::arch::{build, build_initialized, Arch};
use crate::bits::Pattern;
use crate::coupling::{build_coupling_groups, Member};
use crate::graph::Builder;
use crate::rng::{normal, seeded};
use crate::graph::Source;
use alloc::vec;
use proptest::prelude::*;
use rand::Rng;

fn set_from(bits: &[Vec<bool>]) -> PatternSet {
    let ps: Vec<Pattern> = bits.iter().map(|b| Pattern::from_bools(b)).collect();
    PatternSet::from_patterns(0, 0, &ps).unwrap()
}

/// Full N×N table from a per-bit loop; upper triangle summed in integers.
fn full_matrix_nexp(bits: &[Vec<bool>]) -> f64 {
    let n = bits.len();
    let p = bits[0].len();
    let mut m = vec![vec![0u64; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = bits[i].iter().zip(&bits[j]).filter(|(a, b)| a != b).count() as u64;
        }
    }
    let mut total = 0u64;
    for (i, row) in m.iter().enumerate() {
        for &v in &row[i + 1..] {
            total += v;
        }
    }
    total as f64 / (p as f64 * (n * (n - 1) / 2) as f64)
}

/// Column-count identity: Σ_{i<j} d(i,j) = Σ_bits ones·(N − ones).
fn column_count_nexp(bits: &[Vec<bool>]) -> f64 {
    let n = bits.len();
    let p = bits[0].len();
    let mut total = 0u64;
    for b in 0..p {
        let ones = bits.iter().filter(|s| s[b]).count() as u64;
        total += ones * (n as u64 - ones);
    }
    total as f64 / (p as f64 * (n * (n - 1) / 2) as f64)
}

#[test]
fn identical_patterns_score_zero() {
    let row = vec![true, false, true, true];
    let set = set_from(&vec![row; 6]);
    assert_eq!(nexp_score(&set).unwrap(), 0.0);
}

#[test]
fn two_complementary_patterns_score_one() {
    let set = set_from(&[vec![true, false, true], vec![false, true, false]]);
    assert_eq!(nexp_score(&set).unwrap(), 1.0);
}

#[test]
fn single_sample_is_rejected() {
    let set = set_from(&[vec![true, false]]);
    assert_eq!(
        nexp_score(&set).unwrap_err(),
        Error::TooFewSamples { needed: 2, got: 1 }
    );
}

#[test]
fn five_random_patterns_equal_full_matrix() {
    let mut rng = seeded(8);
    let bits: Vec<Vec<bool>> = (0..5).map(|_| (0..37).map(|_| rng.gen()).collect()).collect();
    let set = set_from(&bits);
    assert_eq!(nexp_score(&set).unwrap(), full_matrix_nexp(&bits));
    assert_eq!(nexp_score(&set).unwrap(), column_count_nexp(&bits));
}

#[test]
fn alternative_aggregates() {
    // distances: (0,1)=1, (0,2)=2, (1,2)=3 over P=4
    let bits = [
        vec![false, false, false, false],
        vec![true, false, false, false],
        vec![false, true, true, false],
    ];
    let set = set_from(&bits);
    assert_eq!(nexp_score_with(&set, Aggregate::Min).unwrap(), 0.25);
    assert_eq!(nexp_score_with(&set, Aggregate::Max).unwrap(), 0.75);
    assert_eq!(nexp_score_with(&set, Aggregate::Median).unwrap(), 0.5);
    assert_eq!(nexp_score_with(&set, Aggregate::Mean).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn score_is_bounded_and_order_free(
        bits in (2usize..9, 1usize..80).prop_flat_map(|(n, p)| {
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), p), n)
        }),
        seed in any::<u64>(),
    ) {
        let s = nexp_score(&set_from(&bits)).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, full_matrix_nexp(&bits));
        let mut shuffled = bits.clone();
        let mut rng = seeded(seed);
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        prop_assert_eq!(nexp_score(&set_from(&shuffled)).unwrap(), s);
    }
}

fn random_batch(seed: u64, n: usize) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| normal(&mut rng)).collect()).unwrap()
}

#[test]
fn zero_weight_network_scores_zero_everywhere() {
    for arch in Arch::ALL {
        let net = build(arch, [3, 8, 8], 4).unwrap();
        let map = nexp_map(&net, &random_batch(1, 6), &NexpOptions::default()).unwrap();
        assert!(!map.is_empty());
        assert!(map.scores.values().all(|&v| v == 0.0));
    }
}

#[test]
fn map_covers_every_prunable_filter_once() {
    let net = build_initialized(Arch::Resnet, [3, 8, 8], 4, 3).unwrap();
    let map = nexp_map(&net, &random_batch(2, 8), &NexpOptions::default()).unwrap();
    let total: usize = net
        .conv_nodes()
        .map(|i| match &net.nodes[i].layer {
            Layer::Conv2d(c) => c.out_channels,
            _ => 0,
        })
        .sum();
    assert_eq!(map.len(), total);
    assert_eq!(map.samples, 8);
    assert!(map.scores.values().all(|v| (0.0..=1.0).contains(v)));
    let again = nexp_map(&net, &random_batch(2, 8), &NexpOptions::default()).unwrap();
    assert_eq!(map, again);
    assert!(nexp_map(&net, &random_batch(2, 1), &NexpOptions::default()).is_err());
}

#[test]
fn positive_rescaling_of_captures_is_absorbed() {
    let net = build_initialized(Arch::Vgg, [3, 8, 8], 4, 9).unwrap();
    let batch = random_batch(4, 10);
    let points: Vec<usize> = capture_points(&net).iter().map(|p| p.node).collect();
    let pass = forward(
        &net,
        &batch,
        &ForwardOptions { bn_mode: BnMode::Batch, retain: false, capture: points },
    )
    .unwrap();
    let opts = NexpOptions::default();
    let base = nexp_map_from_captures(&net, pass.captured(), &opts).unwrap();
    for scale in [1e-3f32, 0.37, 2.0, 715.0] {
        let mut scaled = pass.captured().clone();
        for t in scaled.values_mut() {
            t.map_inplace(|v| v * scale);
        }
        assert_eq!(nexp_map_from_captures(&net, &scaled, &opts).unwrap(), base);
    }
}

#[test]
fn group_l1_on_a_hand_built_chain() {
    // conv1: 1 in-channel, 2 filters of 1×2 kernels; conv2 reads them with 1×1
    let mut b = Builder::new([1, 1, 2]);
    let c1 = b.conv(Source::Input, 1, 2, 1, 1, 0);
    let n1 = b.bn(c1, 2);
    let r1 = b.relu(n1);
    let c2 = b.conv(r1, 2, 1, 1, 1, 0);
    let f = b.flatten(c2);
    b.linear(f, 2, 2);
    let mut net = b.finish().unwrap();
    if let Layer::Conv2d(c) = &mut net.nodes[0].layer {
        c.kernel = (1, 2);
        c.padding = 0;
        c.weight = Tensor::new(vec![2, 1, 1, 2], vec![1.0, -2.0, 0.0, 0.0]).unwrap();
    }
    net.input_shape = [1, 1, 3];
    if let Layer::Linear(l) = &mut net.nodes[5].layer {
        *l = crate::layer::Linear::zeroed(2, 2, true);
    }
    if let Layer::Conv2d(c) = &mut net.nodes[3].layer {
        c.weight = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 0.0]).unwrap();
    }
    net.validate().unwrap();
    let groups = build_coupling_groups(&net).unwrap();
    let imp = group_l1_importance(&net, &groups);
    assert_eq!(imp.get(FilterId::new(0, 0)), Some(6.0));
    assert_eq!(imp.get(FilterId::new(0, 1)), Some(0.0));
}

/// Straightforward slice-wise sum written against raw tensor indexing.
fn l1_oracle(net: &Network, g: &CouplingGroup) -> f64 {
    let mut s = 0.0;
    for Member { layer, axis, channels } in &g.members {
        match (&net.nodes[*layer].layer, axis) {
            (Layer::Conv2d(c), Axis::OutChannels) => {
                for o in channels.clone() {
                    for i in 0..c.in_channels {
                        for k in 0..c.kernel_area() {
                            s += f64::from(c.weight.data()[(o * c.in_channels + i) * c.kernel_area() + k].abs());
                        }
                    }
                }
            }
            (Layer::Conv2d(c), Axis::InChannels) => {
                for o in 0..c.out_channels {
                    for i in channels.clone() {
                        for k in 0..c.kernel_area() {
                            s += f64::from(c.weight.data()[(o * c.in_channels + i) * c.kernel_area() + k].abs());
                        }
                    }
                }
            }
            (Layer::Linear(l), Axis::InChannels) => {
                for o in 0..l.out_features {
                    for i in channels.clone() {
                        s += f64::from(l.weight.data()[o * l.in_features + i].abs());
                    }
                }
            }
            _ => {}
        }
    }
    s
}

#[test]
fn group_l1_matches_slice_oracle() {
    for arch in Arch::ALL {
        let net = build_initialized(arch, [3, 8, 8], 4, 12).unwrap();
        let groups = build_coupling_groups(&net).unwrap();
        let imp = group_l1_importance(&net, &groups);
        for g in &groups {
            let got = imp.get(g.anchor).unwrap();
            let want = l1_oracle(&net, g);
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }
}

fn map_of(vals: &[f64], kind: ScoreKind) -> ScoreMap {
    let mut m = ScoreMap::new(kind, "t", 0);
    for (i, &v) in vals.iter().enumerate() {
        m.scores.insert(FilterId::new(0, i), v);
    }
    m
}

#[test]
fn hybrid_hand_arithmetic() {
    let imp = map_of(&[2.0, 4.0, 6.0], ScoreKind::GroupL1);
    let nexp = map_of(&[0.3, 0.1, 0.2], ScoreKind::Nexp);
    let h = hybrid_score(&imp, &nexp, HybridConfig { alpha: 0.5 }).unwrap();
    // imp → 0, .5, 1; nexp → 1, 0, .5
    let want = [0.5, 0.25, 0.75];
    for (i, w) in want.iter().enumerate() {
        assert!((h.get(FilterId::new(0, i)).unwrap() - w).abs() < 1e-15);
    }
}

#[test]
fn hybrid_endpoints_reproduce_pure_rankings() {
    let mut rng = seeded(5);
    let imp = map_of(&(0..40).map(|_| rng.gen_range(0.0..50.0)).collect::<Vec<_>>(), ScoreKind::GroupL1);
    let nexp = map_of(&(0..40).map(|_| rng.gen::<f64>()).collect::<Vec<_>>(), ScoreKind::Nexp);
    let h0 = hybrid_score(&imp, &nexp, HybridConfig { alpha: 0.0 }).unwrap();
    let h1 = hybrid_score(&imp, &nexp, HybridConfig { alpha: 1.0 }).unwrap();
    assert_eq!(h0.ranking(), imp.ranking());
    assert_eq!(h1.ranking(), nexp.ranking());
}

#[test]
fn hybrid_rejects_key_mismatch() {
    let imp = map_of(&[1.0, 2.0], ScoreKind::GroupL1);
    let nexp = map_of(&[1.0, 2.0, 3.0], ScoreKind::Nexp);
    assert_eq!(
        hybrid_score(&imp, &nexp, HybridConfig { alpha: 0.5 }).unwrap_err(),
        Error::KeyMismatch
    );
}

#[test]
fn ties_rank_by_layer_then_filter() {
    let mut m = ScoreMap::new(ScoreKind::Nexp, "t", 0);
    m.scores.insert(FilterId::new(3, 0), 0.5);
    m.scores.insert(FilterId::new(1, 2), 0.5);
    m.scores.insert(FilterId::new(1, 1), 0.5);
    m.scores.insert(FilterId::new(0, 9), 0.7);
    assert_eq!(
        m.ranking(),
        vec![FilterId::new(1, 1), FilterId::new(1, 2), FilterId::new(3, 0), FilterId::new(0, 9)]
    );
}

proptest! {
    #[test]
    fn normalization_preserves_ranking(vals in proptest::collection::vec(-1e3f64..1e3, 1..60)) {
        let m = map_of(&vals, ScoreKind::Nexp);
        let n = m.min_max_normalized();
        prop_assert!(n.scores.values().all(|v| (0.0..=1.0).contains(v)));
        let distinct = {
            let mut v = vals.clone();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[1] - w[0] > 1e-9)
        };
        if distinct {
            prop_assert_eq!(n.ranking(), m.ranking());
        }
    }
}
