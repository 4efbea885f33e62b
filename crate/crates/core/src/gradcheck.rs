//! Central finite-difference checks of every analytic gradient.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::comp_layer::{
    comp_backward_input, comp_backward_params, comp_forward, dense_layer_backward,
    dense_layer_forward, CompFilterBank,
};
use crate::error::Result;
use crate::gaussian::{GaussianComponent, KernelGeometry};
use crate::network::{Layer, Network};
use crate::tensor::{
    fully_connected, fully_connected_backward, softmax_xent, DenseFilterBank, FcParams, Tensor4,
};

const SMALL_COMPOSITIONAL: &str = r#"
[input]
channels = 2
height = 12
width = 12

[[layer]]
type = "comp-conv"
features = 3
kernel = [5, 5]
components = [2, 2]

[[layer]]
type = "relu"

[[layer]]
type = "maxpool"
window = 2
stride = 2

[[layer]]
type = "comp-conv"
features = 2
kernel = [4, 4]
components = [1, 2]

[[layer]]
type = "fully-connected"
outputs = 3

[[layer]]
type = "softmax-loss"
"#;

const SMALL_STANDARD: &str = r#"
[input]
channels = 2
height = 9
width = 9

[[layer]]
type = "dense-conv"
features = 3
kernel = [4, 3]

[[layer]]
type = "relu"

[[layer]]
type = "maxpool"
window = 3
stride = 2

[[layer]]
type = "fully-connected"
outputs = 4

[[layer]]
type = "softmax-loss"
"#;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients which are
/// zero up to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    CompWeight,
    CompMuX,
    CompMuY,
    CompSigma,
    CompBias,
    CompInput,
    DenseWeight,
    DenseBias,
    DenseInput,
    FcWeight,
    FcBias,
    FcInput,
    SoftmaxScores,
    Network,
}

impl ParamClass {
    pub fn name(self) -> &'static str {
        match self {
            ParamClass::CompWeight => "comp weight",
            ParamClass::CompMuX => "comp mu_x",
            ParamClass::CompMuY => "comp mu_y",
            ParamClass::CompSigma => "comp sigma",
            ParamClass::CompBias => "comp bias",
            ParamClass::CompInput => "comp input",
            ParamClass::DenseWeight => "dense weight",
            ParamClass::DenseBias => "dense bias",
            ParamClass::DenseInput => "dense input",
            ParamClass::FcWeight => "fc weight",
            ParamClass::FcBias => "fc bias",
            ParamClass::FcInput => "fc input",
            ParamClass::SoftmaxScores => "softmax scores",
            ParamClass::Network => "network end-to-end",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Test hook: analytic gradients are scaled by `1 + perturb` before the
    /// comparison. Zero in normal use.
    pub perturb: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            tol: REL_TOL,
            perturb: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassResult {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Maximum that lets NaN win, so a NaN anywhere fails the report.
fn worse(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Worst relative error per parameter class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub classes: BTreeMap<ParamClass, ClassResult>,
    /// End-to-end probes dropped because they straddle a non-smooth point.
    pub skipped: usize,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        GradCheckReport {
            tol,
            classes: BTreeMap::new(),
            skipped: 0,
        }
    }

    fn record(&mut self, class: ParamClass, err: f64) {
        let e = self.classes.entry(class).or_insert(ClassResult {
            max_rel_err: 0.0,
            checked: 0,
        });
        e.max_rel_err = worse(e.max_rel_err, err);
        e.checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        for (&class, r) in &other.classes {
            let e = self.classes.entry(class).or_insert(ClassResult {
                max_rel_err: 0.0,
                checked: 0,
            });
            e.max_rel_err = worse(e.max_rel_err, r.max_rel_err);
            e.checked += r.checked;
        }
        self.skipped += other.skipped;
    }

    pub fn max_for(&self, class: ParamClass) -> Option<f64> {
        self.classes.get(&class).map(|r| r.max_rel_err)
    }

    pub fn worst(&self) -> f64 {
        self.classes
            .values()
            .map(|r| r.max_rel_err)
            .fold(0.0, worse)
    }

    pub fn passed(&self) -> bool {
        !self.classes.is_empty() && self.classes.values().all(|r| r.max_rel_err <= self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (class, r) in &self.classes {
            let verdict = if r.max_rel_err <= self.tol {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<20} max rel err {:.3e} over {:>6} checks  {}",
                class.name(),
                r.max_rel_err,
                r.checked,
                verdict
            )?;
        }
        if self.skipped > 0 {
            writeln!(
                f,
                "({} end-to-end probes skipped at ReLU or pooling switches)",
                self.skipped
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic[i]` against the central difference of `objective`,
/// which evaluates the scalar loss with parameter `i` shifted by `delta`.
fn compare<F>(
    report: &mut GradCheckReport,
    class: ParamClass,
    analytic: &[f64],
    opts: &GradCheckOptions,
    mut objective: F,
) -> Result<()>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (objective(i, opts.step)? - objective(i, -opts.step)?) / (2.0 * opts.step);
        report.record(class, rel_err(a * (1.0 + opts.perturb), numeric));
    }
    Ok(())
}

fn shifted(t: &Tensor4, i: usize, delta: f64) -> Tensor4 {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

type FieldRef = fn(&mut GaussianComponent) -> &mut f64;

/// Loss `sum(probe * layer(input))` for a compositional layer, checked for
/// every component parameter, bias and input value.
pub fn check_comp_layer(
    input: &Tensor4,
    bank: &CompFilterBank,
    probe: &Tensor4,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(opts.tol);
    let grads = comp_backward_params(input, probe, bank)?;
    let dx = comp_backward_input(probe, bank)?;
    let loss =
        |x: &Tensor4, b: &CompFilterBank| -> Result<f64> { Ok(comp_forward(x, b)?.dot(probe)) };

    let slots: Vec<(usize, usize)> = bank
        .groups()
        .iter()
        .enumerate()
        .flat_map(|(g, comps)| (0..comps.len()).map(move |k| (g, k)))
        .collect();
    let fields: [(ParamClass, FieldRef); 4] = [
        (ParamClass::CompWeight, |c| &mut c.weight),
        (ParamClass::CompMuX, |c| &mut c.mu_x),
        (ParamClass::CompMuY, |c| &mut c.mu_y),
        (ParamClass::CompSigma, |c| &mut c.sigma),
    ];
    for (class, field) in fields {
        let analytic: Vec<f64> = slots
            .iter()
            .map(|&(g, k)| {
                let cg = grads.groups[g][k];
                match class {
                    ParamClass::CompWeight => cg.weight,
                    ParamClass::CompMuX => cg.mu_x,
                    ParamClass::CompMuY => cg.mu_y,
                    _ => cg.sigma,
                }
            })
            .collect();
        compare(&mut report, class, &analytic, opts, |i, delta| {
            let (g, k) = slots[i];
            let mut b = bank.clone();
            *field(&mut b.groups_mut()[g][k]) += delta;
            loss(input, &b)
        })?;
    }
    compare(
        &mut report,
        ParamClass::CompBias,
        &grads.bias,
        opts,
        |i, delta| {
            let mut b = bank.clone();
            b.bias_mut()[i] += delta;
            loss(input, &b)
        },
    )?;
    compare(
        &mut report,
        ParamClass::CompInput,
        dx.data(),
        opts,
        |i, delta| loss(&shifted(input, i, delta), bank),
    )?;
    Ok(report)
}

pub fn check_dense_layer(
    input: &Tensor4,
    bank: &DenseFilterBank,
    probe: &Tensor4,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(opts.tol);
    let g = dense_layer_backward(input, probe, bank)?;
    let loss = |x: &Tensor4, b: &DenseFilterBank| -> Result<f64> {
        Ok(dense_layer_forward(x, b)?.dot(probe))
    };
    compare(
        &mut report,
        ParamClass::DenseWeight,
        &g.weights,
        opts,
        |i, delta| {
            let mut b = bank.clone();
            b.weights[i] += delta;
            loss(input, &b)
        },
    )?;
    compare(
        &mut report,
        ParamClass::DenseBias,
        &g.bias,
        opts,
        |i, delta| {
            let mut b = bank.clone();
            b.bias[i] += delta;
            loss(input, &b)
        },
    )?;
    compare(
        &mut report,
        ParamClass::DenseInput,
        g.input.data(),
        opts,
        |i, delta| loss(&shifted(input, i, delta), bank),
    )?;
    Ok(report)
}

pub fn check_fully_connected(
    input: &Tensor4,
    fc: &FcParams,
    probe: &Tensor4,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(opts.tol);
    let g = fully_connected_backward(input, fc, probe)?;
    let loss = |x: &Tensor4, p: &FcParams| -> Result<f64> { Ok(fully_connected(x, p)?.dot(probe)) };
    compare(
        &mut report,
        ParamClass::FcWeight,
        &g.weights,
        opts,
        |i, delta| {
            let mut p = fc.clone();
            p.weights[i] += delta;
            loss(input, &p)
        },
    )?;
    compare(
        &mut report,
        ParamClass::FcBias,
        &g.bias,
        opts,
        |i, delta| {
            let mut p = fc.clone();
            p.bias[i] += delta;
            loss(input, &p)
        },
    )?;
    compare(
        &mut report,
        ParamClass::FcInput,
        g.input.data(),
        opts,
        |i, delta| loss(&shifted(input, i, delta), fc),
    )?;
    Ok(report)
}

pub fn check_softmax(
    scores: &Tensor4,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(opts.tol);
    let (_, grad) = softmax_xent(scores, labels)?;
    compare(
        &mut report,
        ParamClass::SoftmaxScores,
        grad.data(),
        opts,
        |i, delta| Ok(softmax_xent(&shifted(scores, i, delta), labels)?.0),
    )?;
    Ok(report)
}

/// Which ReLUs are active and which element wins every pooling window.
/// Within one pattern the network is smooth in its parameters.
fn activation_pattern(network: &Network, input: &Tensor4) -> Result<(Vec<bool>, Vec<usize>)> {
    let trace = network.forward(input)?;
    let mut active = Vec::new();
    let mut winners = Vec::new();
    for (i, layer) in network.layers().iter().enumerate() {
        match layer {
            Layer::Relu => active.extend(trace.inputs[i].data().iter().map(|&v| v > 0.0)),
            Layer::MaxPool { .. } => {
                if let Some(Some(idx)) = trace.pools().get(i) {
                    winners.extend_from_slice(idx.argmax());
                }
            }
            _ => {}
        }
    }
    Ok((active, winners))
}

/// End-to-end check of the flattened network gradient on at most
/// `max_checks` evenly strided parameters.
///
/// The numeric side uses the fourth-order stencil
/// `(-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)) / 12h`, since composed layers have
/// enough curvature to swamp the plain central difference on small
/// gradients. Parameters whose stencil straddles a ReLU or pooling switch
/// are not differentiable there and are counted as skipped.
pub fn check_network(
    network: &Network,
    input: &Tensor4,
    labels: &[usize],
    max_checks: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(opts.tol);
    let (_, grads) = network.loss_and_grads(input, labels)?;
    let flat = network.flatten_grads(&grads);
    let params = network.params();
    let pattern = activation_pattern(network, input)?;
    let stride = flat.len().div_ceil(max_checks.max(1)).max(1);
    let h = opts.step;
    let mut net = network.clone();
    let mut skipped = 0;
    for i in (0..flat.len()).step_by(stride) {
        let mut values = [0.0; 4];
        let mut smooth = true;
        for (v, k) in values.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
            let mut p = params.clone();
            p[i] += k * h;
            net.set_params(&p)?;
            smooth &= activation_pattern(&net, input)? == pattern;
            *v = net.loss_and_grads(input, labels)?.0;
        }
        if !smooth {
            skipped += 1;
            continue;
        }
        let numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * h);
        report.record(
            ParamClass::Network,
            rel_err(flat[i] * (1.0 + opts.perturb), numeric),
        );
    }
    report.skipped += skipped;
    Ok(report)
}

fn normal_tensor<R: Rng>(rng: &mut R, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.sample(StandardNormal))
}

/// A random compositional layer case: input `2x2x10x10`, two features,
/// kernel sides drawn from 5..=9 and a square component grid of 1, 4 or 9.
#[derive(Clone, Debug)]
pub struct CompCase {
    pub input: Tensor4,
    pub bank: CompFilterBank,
    pub probe: Tensor4,
}

pub fn random_comp_case<R: Rng>(rng: &mut R) -> Result<CompCase> {
    let geom = KernelGeometry::new(rng.random_range(5..=9), rng.random_range(5..=9))?;
    let side = [1usize, 2, 3][rng.random_range(0..3)];
    let (features, channels) = (2, 2);
    let (x0, x1) = geom.mu_x_range();
    let (y0, y1) = geom.mu_y_range();
    let groups = (0..features * channels)
        .map(|_| {
            (0..side * side)
                .map(|_| {
                    GaussianComponent::new(
                        rng.sample(StandardNormal),
                        rng.random_range(x0..=x1),
                        rng.random_range(y0..=y1),
                        rng.random_range(0.6..2.5),
                    )
                })
                .collect()
        })
        .collect();
    let bias = (0..features).map(|_| rng.sample(StandardNormal)).collect();
    let bank = CompFilterBank::new(features, channels, geom, groups, bias)?;
    let input = normal_tensor(rng, 2, channels, 10, 10);
    let probe = normal_tensor(rng, 2, features, 10 - geom.kh + 1, 10 - geom.kw + 1);
    Ok(CompCase { input, bank, probe })
}

/// Every suite on `cases` random compositional layers plus fixed-size
/// dense, fully-connected, softmax and small end-to-end networks.
pub fn run_all(seed: u64, cases: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::new(opts.tol);
    for _ in 0..cases {
        let case = random_comp_case(&mut rng)?;
        report.merge(&check_comp_layer(
            &case.input,
            &case.bank,
            &case.probe,
            opts,
        )?);
    }

    let input = normal_tensor(&mut rng, 2, 2, 8, 8);
    let n = 3 * 2 * 3 * 4;
    let bank = DenseFilterBank::new(
        3,
        2,
        3,
        4,
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        vec![0.1, -0.2, 0.3],
    )?;
    let probe = normal_tensor(&mut rng, 2, 3, 6, 5);
    report.merge(&check_dense_layer(&input, &bank, &probe, opts)?);

    let fc = FcParams::new(
        2 * 8 * 8,
        5,
        (0..5 * 128).map(|_| rng.sample(StandardNormal)).collect(),
        (0..5).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let probe = normal_tensor(&mut rng, 2, 5, 1, 1);
    report.merge(&check_fully_connected(&input, &fc, &probe, opts)?);

    let scores = normal_tensor(&mut rng, 4, 6, 1, 1);
    report.merge(&check_softmax(&scores, &[0, 5, 2, 2], opts)?);

    for text in [SMALL_COMPOSITIONAL, SMALL_STANDARD] {
        let cfg = crate::config::NetworkConfig::parse(text)?;
        let net = Network::new(cfg, rng.random())?;
        let shape = net.config().input;
        let input = normal_tensor(&mut rng, 3, shape.channels, shape.height, shape.width);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..net.classes())).collect();
        report.merge(&check_network(&net, &input, &labels, 400, opts)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9) - 1e-3).abs() < 1e-15);
        assert!(rel_err(f64::NAN, 1.0).is_nan());
    }

    #[test]
    fn nan_fails_the_report() {
        let mut r = GradCheckReport::new(1e-4);
        r.record(ParamClass::FcBias, 0.0);
        r.record(ParamClass::FcBias, f64::NAN);
        r.record(ParamClass::FcBias, 0.0);
        assert!(!r.passed());
        assert!(GradCheckReport::new(1e-4).classes.is_empty());
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let case = random_comp_case(&mut rng).unwrap();
        let good = check_comp_layer(
            &case.input,
            &case.bank,
            &case.probe,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(good.passed(), "{}", good);
        let bad_opts = GradCheckOptions {
            perturb: 1e-2,
            ..Default::default()
        };
        let bad = check_comp_layer(&case.input, &case.bank, &case.probe, &bad_opts).unwrap();
        assert!(!bad.passed());
        assert!(bad.worst() > 5e-3);
    }

    #[test]
    fn all_suites_pass_and_repeat() {
        let opts = GradCheckOptions::default();
        let a = run_all(11, 3, &opts).unwrap();
        assert!(a.passed(), "{}", a);
        assert_eq!(a.classes.len(), 14);
        assert_eq!(run_all(11, 3, &opts).unwrap(), a);
        let bad = run_all(
            11,
            3,
            &GradCheckOptions {
                perturb: 1e-2,
                ..opts
            },
        )
        .unwrap();
        assert!(bad.max_for(ParamClass::Network).unwrap() > opts.tol);
    }
}
