//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria that need CIFAR-10 read it from `DCN_CIFAR10_DIR`. Without the
//! data they print FAIL with the reason and are not asserted; with the data
//! they run in full (hours of CPU) and are asserted like the rest.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcn_core::bench::{max_rel_diff, random_bank, run_bench, BenchConfig};
use dcn_core::comp_layer::{comp_forward, separable_forward, CompFilterBank};
use dcn_core::config::{NetworkConfig, CIFAR10_COMPOSITIONAL, CIFAR10_STANDARD};
use dcn_core::data::{cifar10_present, load_cifar10};
use dcn_core::gaussian::{
    d_kernel_d_mu, d_kernel_d_sigma, unit_kernel, GaussianComponent, KernelGeometry,
};
use dcn_core::gradcheck::{run_all, GradCheckOptions, ParamClass};
use dcn_core::model_file::ModelFile;
use dcn_core::network::{Layer, Network};
use dcn_core::optim::{train, TrainConfig};
use dcn_core::pgm::read_pgm;
use dcn_core::prune::{prune_network, DEFAULT_DISCARD_FRACTION, DEFAULT_MERGE_TAU};
use dcn_core::tensor::{FcParams, Tensor4};
use dcn_core::viz::{
    graphcut_boundary, mean_reconstruct, receptive_field, visualize_feature, DistributionMap,
};

struct Outcome {
    pass: bool,
    detail: String,
    /// False when the criterion could not run in this environment.
    ran: bool,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
        ran: true,
    }
}

fn blocked(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: false,
        detail: detail.into(),
        ran: false,
    }
}

fn criterion_1() -> Outcome {
    let report = run_all(1, 60, &GradCheckOptions::default()).unwrap();
    let classes = [
        ParamClass::CompWeight,
        ParamClass::CompMuX,
        ParamClass::CompMuY,
        ParamClass::CompSigma,
        ParamClass::CompBias,
        ParamClass::CompInput,
    ];
    let worst = classes
        .iter()
        .map(|&c| report.max_for(c).unwrap_or(f64::NAN))
        .fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
    outcome(
        worst <= 1e-4 && report.passed(),
        format!(
            "60 random layers, worst component-class rel err {:.2e} (tol 1e-4, h 1e-4)",
            worst
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_deriv) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let geom = KernelGeometry::new(rng.random_range(4..=15), rng.random_range(4..=15)).unwrap();
        let (x0, x1) = geom.mu_x_range();
        let (y0, y1) = geom.mu_y_range();
        let c = GaussianComponent::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(x0..=x1),
            rng.random_range(y0..=y1),
            rng.random_range(0.501..5.0),
        );
        worst_sum = worst_sum.max((unit_kernel(&c, geom).iter().sum::<f64>() - 1.0).abs());
        let (dx, dy) = d_kernel_d_mu(&c, geom);
        for k in [dx, dy, d_kernel_d_sigma(&c, geom)] {
            worst_deriv = worst_deriv.max(k.iter().sum::<f64>().abs());
        }
    }
    outcome(
        worst_sum <= 1e-12 && worst_deriv <= 1e-10,
        format!(
            "1000 random components: |sum G - 1| <= {:.1e} (tol 1e-12), |sum dG| <= {:.1e} (tol 1e-10)",
            worst_sum, worst_deriv
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let geom = KernelGeometry::new(rng.random_range(4..=15), rng.random_range(4..=15)).unwrap();
        let g = rng.random_range(1..=9);
        let bank = random_bank(&mut rng, 3, 2, geom, g).unwrap();
        let input = Tensor4::from_fn(2, 2, 20, 21, |_, _, _, _| rng.random_range(-1.0..1.0));
        let a = comp_forward(&input, &bank).unwrap();
        let b = separable_forward(&input, &bank).unwrap();
        worst = worst.max(max_rel_diff(&a, &b));
    }
    outcome(
        worst <= 1e-10,
        format!("50 random layers, max rel diff {:.1e} (tol 1e-10)", worst),
    )
}

fn speedup(k: usize, g: usize) -> f64 {
    let cfg = BenchConfig {
        kernels: vec![k],
        components: g,
        ..Default::default()
    };
    run_bench(&cfg).unwrap()[0].speedup
}

fn criterion_4() -> Outcome {
    let large = speedup(15, 3);
    let small = speedup(5, 4);
    outcome(
        large >= 2.0 && small <= 1.2,
        format!(
            "single-threaded median speedup {:.2}x at 15x15, G=3 (need >= 2.0); {:.2}x at 5x5, G=4 (need <= 1.2)",
            large, small
        ),
    )
}

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("DCN_CIFAR10_DIR")
        .map(PathBuf::from)
        .filter(|d| cifar10_present(d))
}

/// Trained compositional and dense CIFAR-10 networks, shared by 5 and 6.
struct CifarRuns {
    comp: Network,
    comp_acc: f64,
    dense_acc: f64,
    test: dcn_core::data::LabeledDataset,
    minutes: f64,
}

fn cifar_runs(dir: &Path) -> CifarRuns {
    let (train_set, test_set) = load_cifar10(dir).unwrap();
    let tc = TrainConfig {
        batch_size: 100,
        iterations: 2000,
        eval_interval: 2000,
        seed: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let mut comp = Network::new(NetworkConfig::parse(CIFAR10_COMPOSITIONAL).unwrap(), 0).unwrap();
    let h = train(&mut comp, &train_set, &test_set, &tc).unwrap();
    let comp_acc = h.last_eval().unwrap().test_accuracy.unwrap();
    let mut dense = Network::new(NetworkConfig::parse(CIFAR10_STANDARD).unwrap(), 0).unwrap();
    let h = train(&mut dense, &train_set, &test_set, &tc).unwrap();
    let dense_acc = h.last_eval().unwrap().test_accuracy.unwrap();
    CifarRuns {
        comp,
        comp_acc,
        dense_acc,
        test: test_set,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    }
}

fn criterion_5(runs: Option<&CifarRuns>) -> Outcome {
    let Some(r) = runs else {
        return blocked("CIFAR-10 not found (set DCN_CIFAR10_DIR to the binary batches)");
    };
    let gap = (r.comp_acc - r.dense_acc).abs();
    outcome(
        r.comp_acc >= 0.5 && gap <= 0.05,
        format!(
            "2000 iterations at batch 100: compositional {:.1}%, dense {:.1}% (gap {:.1} points), {:.0} min for both",
            100.0 * r.comp_acc,
            100.0 * r.dense_acc,
            100.0 * gap,
            r.minutes
        ),
    )
}

fn criterion_6(runs: Option<&CifarRuns>) -> Outcome {
    let Some(r) = runs else {
        return blocked("CIFAR-10 not found (set DCN_CIFAR10_DIR to the binary batches)");
    };
    let mut net = r.comp.clone();
    let (before, _) = net.evaluate(&r.test.images, &r.test.labels, 100).unwrap();
    let report = prune_network(&mut net, &[], DEFAULT_MERGE_TAU, DEFAULT_DISCARD_FRACTION).unwrap();
    let (after, _) = net.evaluate(&r.test.images, &r.test.labels, 100).unwrap();
    let removed = report[1].removed_fraction();
    let change = (after - before).abs() / before;
    outcome(
        removed >= 0.15 && change <= 0.02,
        format!(
            "layer 2: {:.1}% of components removed (need >= 15%), test loss {:.4} -> {:.4} ({:.2}% change, need <= 2%)",
            100.0 * removed,
            before,
            after,
            100.0 * change
        ),
    )
}

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
            cap[prev[v]][v] -= push;
            cap[v][prev[v]] += push;
            v = prev[v];
        }
        flow += push;
    }
}

fn oracle_cut(maps: &DistributionMap) -> f64 {
    let (w, n) = (maps.width, maps.width * maps.height);
    let d = maps.difference();
    let mut cap = vec![vec![0.0; n + 2]; n + 2];
    for p in 0..n {
        cap[n][p] = maps.neg_map[p];
        cap[p][n + 1] = maps.pos_map[p];
        for q in [p + 1, p + w] {
            let right_ok = q == p + 1 && (p + 1) % w != 0;
            let down_ok = q == p + w && q < n;
            if right_ok || down_ok {
                let c = (d[p] - d[q]).powi(2);
                cap[p][q] = c;
                cap[q][p] = c;
            }
        }
    }
    edmonds_karp(cap, n, n + 1)
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

/// `(x, y, var, weight, sign)`
type Leaf = (f64, f64, f64, f64, i8);

/// Two-layer network with hand-chosen components and its leaves worked
/// out by hand.
fn hand_built() -> (Network, Vec<Leaf>) {
    let c = GaussianComponent::new;
    let a = CompFilterBank::new(
        2,
        1,
        KernelGeometry::square(5).unwrap(),
        vec![
            vec![c(0.5, 1.5, 2.0, 0.6), c(-0.3, 2.5, 2.5, 0.8)],
            vec![c(0.4, 2.0, 2.0, 1.0)],
        ],
        vec![0.0; 2],
    )
    .unwrap();
    let b = CompFilterBank::new(
        1,
        2,
        KernelGeometry::square(4).unwrap(),
        vec![
            vec![c(0.7, 1.5, 1.5, 0.9), c(-0.4, 1.5, 1.5, 1.2)],
            vec![c(0.6, 1.5, 1.5, 0.7)],
        ],
        vec![0.0],
    )
    .unwrap();
    let layers = vec![
        Layer::CompConv(a),
        Layer::Relu,
        Layer::MaxPool {
            window: 2,
            stride: 2,
        },
        Layer::CompConv(b),
        Layer::FullyConnected(FcParams::new(1, 2, vec![1.0, -1.0], vec![0.0; 2]).unwrap()),
        Layer::SoftmaxLoss,
    ];
    let net = Network::from_layers(NetworkConfig::parse(TWO_LAYER).unwrap(), layers).unwrap();
    let leaves = vec![
        (-0.5, 0.0, 0.81 + 0.36, 0.35, 1),
        (0.5, 0.5, 0.81 + 0.64, 0.21, -1),
        (0.0, 0.0, 0.49 + 1.0, 0.24, 1),
    ];
    (net, leaves)
}

fn criterion_7(scratch: &Path) -> Outcome {
    let (net, leaves) = hand_built();
    let recons = mean_reconstruct(&net, 2, 0).unwrap();
    let hand_ok = receptive_field(&net, 2).unwrap() == (12, 12)
        && recons.len() == leaves.len()
        && recons.iter().zip(&leaves).all(|(r, &(x, y, v, w, s))| {
            (r.pos.0 - x).abs() < 1e-12
                && (r.pos.1 - y).abs() < 1e-12
                && (r.var - v).abs() < 1e-12
                && (r.weight - w).abs() < 1e-12
                && r.sign == s
        });

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_cut = 0.0f64;
    for _ in 0..100 {
        let mut grid = || {
            (0..64)
                .map(|_| rng.random_range(0.0..1.0))
                .collect::<Vec<f64>>()
        };
        let maps = DistributionMap {
            width: 8,
            height: 8,
            pos_map: grid(),
            neg_map: grid(),
        };
        let got = graphcut_boundary(&maps).unwrap().cut_value;
        let want = oracle_cut(&maps);
        worst_cut = worst_cut.max((got - want).abs() / (1.0 + want));
    }

    let model = scratch.join("viz-model.dcn");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shapes-small.toml");
    let status = Command::new(env!("CARGO_BIN_EXE_dcn"))
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
        ])
        .args([
            "--dataset",
            "synth",
            "--synth-train",
            "400",
            "--synth-test",
            "100",
        ])
        .args([
            "--iterations",
            "150",
            "--batch-size",
            "50",
            "--eval-interval",
            "150",
        ])
        .env_remove("DCN_CIFAR10_DIR")
        .output()
        .unwrap()
        .status;
    let trained = ModelFile::load(&model).unwrap().network;
    let dir = scratch.join("viz");
    let mut files_ok = status.success();
    let mut depth_ok = true;
    let mut images = 0;
    for f in 0..8 {
        let out = visualize_feature(&trained, 2, f, &dir).unwrap();
        for path in [&out.blobs, &out.boundary] {
            files_ok &= read_pgm(path).is_ok();
            images += 1;
        }
        for r in &out.recons {
            depth_ok &= r.var_path.len() == 2
                && r.var_path[0] > 0.0
                && r.var_path.windows(2).all(|w| w[1] > w[0])
                && *r.var_path.last().unwrap() == r.var;
        }
    }
    outcome(
        hand_ok && worst_cut <= 1e-9 && files_ok && depth_ok,
        format!(
            "hand-built reconstruction exact: {}; 100 random 8x8 cuts, worst rel gap to oracle {:.1e}; \
             trained model: {} well-formed PGMs: {}, variances positive and increasing: {}",
            hand_ok, worst_cut, images, files_ok, depth_ok
        ),
    )
}

fn criterion_8(scratch: &Path) -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shapes-small.toml");
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let model = scratch.join(format!("det-{}.dcn", tag));
        let history = scratch.join(format!("det-{}.csv", tag));
        let o = Command::new(env!("CARGO_BIN_EXE_dcn"))
            .args(["train", "--config", cfg.to_str().unwrap()])
            .args([
                "--out",
                model.to_str().unwrap(),
                "--history",
                history.to_str().unwrap(),
            ])
            .args([
                "--dataset",
                "synth",
                "--synth-train",
                "200",
                "--synth-test",
                "50",
            ])
            .args([
                "--iterations",
                "40",
                "--batch-size",
                "25",
                "--eval-interval",
                "10",
            ])
            .args(["--seed", "13", "--deterministic"])
            .env_remove("DCN_CIFAR10_DIR")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(model).unwrap(),
            std::fs::read(history).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a == b,
        format!(
            "two seeded training runs: model files identical: {}, history CSVs identical: {}",
            a.0 == b.0,
            a.1 == b.1
        ),
    )
}

#[test]
fn acceptance() {
    let scratch = tempfile::tempdir().unwrap();
    let runs = cifar_dir().map(|d| cifar_runs(&d));
    let results = [
        ("gradient fidelity", criterion_1()),
        ("normalization identity", criterion_2()),
        ("separable exactness", criterion_3()),
        ("separable speedup", criterion_4()),
        ("CIFAR-10 discriminative parity", criterion_5(runs.as_ref())),
        ("pruning behavior", criterion_6(runs.as_ref())),
        ("visualization pipeline", criterion_7(scratch.path())),
        ("determinism", criterion_8(scratch.path())),
    ];
    for (i, (name, o)) in results.iter().enumerate() {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{} criterion {} ({}): {}", verdict, i + 1, name, o.detail);
    }
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, (_, o))| o.ran && !o.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "criteria failed: {:?}", failed);
}
