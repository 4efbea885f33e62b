use std::collections::VecDeque;

use dcn_core::comp_layer::CompFilterBank;
use dcn_core::config::NetworkConfig;
use dcn_core::gaussian::{GaussianComponent, KernelGeometry};
use dcn_core::network::{Layer, Network};
use dcn_core::tensor::FcParams;
use dcn_core::viz::{graphcut_boundary, mean_reconstruct, receptive_field, DistributionMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edmonds-Karp on a dense capacity matrix.
fn edmonds_karp(mut cap: Vec<Vec<f64>>, s: usize, t: usize) -> f64 {
    let n = cap.len();
    let mut flow = 0.0;
    loop {
        let mut prev = vec![usize::MAX; n];
        prev[s] = s;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if prev[v] == usize::MAX && cap[u][v] > 1e-12 {
                    prev[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if prev[t] == usize::MAX {
            return flow;
        }
        let mut push = f64::INFINITY;
        let mut v = t;
        while v != s {
            push = push.min(cap[prev[v]][v]);
            v = prev[v];
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            cap[u][v] -= push;
            cap[v][u] += push;
            v = u;
        }
        flow += push;
    }
}

fn oracle_cut(maps: &DistributionMap) -> f64 {
    let (w, h) = (maps.width, maps.height);
    let n = w * h;
    let d = maps.difference();
    let mut cap = vec![vec![0.0; n + 2]; n + 2];
    for (p, (&neg, &pos)) in maps.neg_map.iter().zip(&maps.pos_map).enumerate() {
        cap[n][p] += neg;
        cap[p][n + 1] += pos;
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut link = |q: usize| {
                let c = (d[p] - d[q]).powi(2);
                cap[p][q] += c;
                cap[q][p] += c;
            };
            if x + 1 < w {
                link(p + 1);
            }
            if y + 1 < h {
                link(p + w);
            }
        }
    }
    edmonds_karp(cap, n, n + 1)
}

/// Capacity of the cut induced by a labelling, computed directly.
fn labelling_cost(maps: &DistributionMap, positive: &[bool]) -> f64 {
    let (w, h) = (maps.width, maps.height);
    let d = maps.difference();
    let mut cost = 0.0;
    for (p, &side) in positive.iter().enumerate() {
        // sink-side pixels cut their source edge and vice versa
        cost += if side {
            maps.neg_map[p]
        } else {
            maps.pos_map[p]
        };
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w && positive[p] != positive[p + 1] {
                cost += (d[p] - d[p + 1]).powi(2);
            }
            if y + 1 < h && positive[p] != positive[p + w] {
                cost += (d[p] - d[p + w]).powi(2);
            }
        }
    }
    cost
}

#[test]
fn graph_cut_matches_edmonds_karp_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (w, h) = (8, 8);
        let mut random =
            || -> Vec<f64> { (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect() };
        let maps = DistributionMap {
            width: w,
            height: h,
            pos_map: random(),
            neg_map: random(),
        };
        let cut = graphcut_boundary(&maps).unwrap();
        let expected = oracle_cut(&maps);
        assert!(
            (cut.cut_value - expected).abs() <= 1e-9 * (1.0 + expected),
            "{} vs {}",
            cut.cut_value,
            expected
        );
        // the returned labelling realises the minimum
        let cost = labelling_cost(&maps, &cut.positive);
        assert!((cost - expected).abs() <= 1e-9 * (1.0 + expected));
        for (p, &b) in cut.boundary.iter().enumerate() {
            assert!(b >= 0.0);
            let (x, y) = (p % w, p / w);
            let touches = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ]
            .into_iter()
            .flatten()
            .any(|q| cut.positive[q] != cut.positive[p]);
            if !touches {
                assert_eq!(b, 0.0);
            }
        }
    }
}

const TWO_LAYER: &str = r#"
[input]
channels = 1
height = 12
width = 12

[[layer]]
type = "comp-conv"
features = 2
kernel = [5, 5]
components = [1, 1]

[[layer]]
type = "relu"

[[layer]]
type = "maxpool"
window = 2
stride = 2

[[layer]]
type = "comp-conv"
features = 1
kernel = [4, 4]
components = [1, 1]

[[layer]]
type = "fully-connected"
outputs = 2

[[layer]]
type = "softmax-loss"
"#;

fn hand_built() -> Network {
    let c = GaussianComponent::new;
    let a = CompFilterBank::new(
        2,
        1,
        KernelGeometry::square(5).unwrap(),
        vec![
            vec![c(0.5, 1.5, 2.0, 0.6), c(-0.3, 2.5, 2.5, 0.8)],
            vec![c(0.4, 2.0, 2.0, 1.0)],
        ],
        vec![0.0, 0.0],
    )
    .unwrap();
    let b = CompFilterBank::new(
        1,
        2,
        KernelGeometry::square(4).unwrap(),
        vec![
            // the negative component is an absence request and is not followed
            vec![c(0.7, 1.5, 1.5, 0.9), c(-0.4, 1.5, 1.5, 1.2)],
            vec![c(0.6, 1.5, 1.5, 0.7)],
        ],
        vec![0.0],
    )
    .unwrap();
    let fc = FcParams::new(1, 2, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
    let layers = vec![
        Layer::CompConv(a),
        Layer::Relu,
        Layer::MaxPool {
            window: 2,
            stride: 2,
        },
        Layer::CompConv(b),
        Layer::FullyConnected(fc),
        Layer::SoftmaxLoss,
    ];
    Network::from_layers(NetworkConfig::parse(TWO_LAYER).unwrap(), layers).unwrap()
}

#[test]
fn two_layer_reconstruction_is_exact() {
    let net = hand_built();
    assert_eq!(receptive_field(&net, 2).unwrap(), (12, 12));
    let recons = mean_reconstruct(&net, 2, 0).unwrap();
    // (pos, var, weight, sign), worked out by hand
    let expected = [
        ((-0.5, 0.0), 0.81 + 0.36, 0.7 * 0.5, 1),
        ((0.5, 0.5), 0.81 + 0.64, 0.7 * 0.3, -1),
        ((0.0, 0.0), 0.49 + 1.0, 0.6 * 0.4, 1),
    ];
    assert_eq!(recons.len(), expected.len());
    for (r, (pos, var, weight, sign)) in recons.iter().zip(expected) {
        assert!(
            (r.pos.0 - pos.0).abs() < 1e-12 && (r.pos.1 - pos.1).abs() < 1e-12,
            "{:?}",
            r.pos
        );
        assert!((r.var - var).abs() < 1e-12);
        assert!((r.weight - weight).abs() < 1e-12);
        assert_eq!(r.sign, sign);
        assert_eq!(r.var_path.len(), 2);
        assert_eq!(*r.var_path.last().unwrap(), r.var);
    }
}

#[test]
fn first_layer_reconstruction_is_the_filter_itself() {
    let net = hand_built();
    assert_eq!(receptive_field(&net, 1).unwrap(), (5, 5));
    let recons = mean_reconstruct(&net, 1, 0).unwrap();
    assert_eq!(recons.len(), 2);
    assert_eq!(recons[0].pos, (-0.5, 0.0));
    assert_eq!(recons[1].pos, (0.5, 0.5));
    assert_eq!(recons[1].sign, -1);
    assert!((recons[1].var - 0.64).abs() < 1e-15);
}
