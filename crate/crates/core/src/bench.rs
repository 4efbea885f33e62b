//! Direct versus separable inference timing for compositional layers.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::comp_layer::{comp_forward, separable_forward, CompFilterBank};
use crate::error::{invalid, Result};
use crate::gaussian::{GaussianComponent, KernelGeometry};
use crate::tensor::Tensor4;

/// Outputs of the two paths must agree to this relative tolerance before
/// anything is timed.
pub const EQUALITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub kernels: Vec<usize>,
    /// Components per `(feature, channel)` group.
    pub components: usize,
    pub features: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kernels: vec![5, 7, 9, 11, 13, 15],
            components: 3,
            features: 8,
            channels: 8,
            height: 64,
            width: 64,
            batch: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub t_direct: f64,
    pub t_separable: f64,
    pub speedup: f64,
    pub max_rel_diff: f64,
}

pub const CSV_HEADER: &str = "k,t_direct,t_separable,speedup";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.k, r.t_direct, r.t_separable, r.speedup
        ));
    }
    s
}

/// Largest elementwise difference relative to the largest magnitude.
pub fn max_rel_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Bank with `g` components per group at random admissible positions.
pub fn random_bank<R: Rng>(
    rng: &mut R,
    f: usize,
    s: usize,
    geom: KernelGeometry,
    g: usize,
) -> Result<CompFilterBank> {
    let (x0, x1) = geom.mu_x_range();
    let (y0, y1) = geom.mu_y_range();
    let groups = (0..f * s)
        .map(|_| {
            (0..g)
                .map(|_| {
                    GaussianComponent::new(
                        rng.sample(StandardNormal),
                        rng.random_range(x0..=x1),
                        rng.random_range(y0..=y1),
                        rng.random_range(0.6..3.0),
                    )
                })
                .collect()
        })
        .collect();
    let bias = (0..f).map(|_| rng.sample(StandardNormal)).collect();
    CompFilterBank::new(f, s, geom, groups, bias)
}

fn time<T>(mut run: impl FnMut() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(run()?);
    Ok(start.elapsed().as_secs_f64())
}

/// Times both paths on identical inputs, single-threaded, reporting the
/// median over `repeats`.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.components == 0 {
        return Err(invalid("bench needs at least one repeat and one component"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.kernels.len());
    for &k in &cfg.kernels {
        let geom = KernelGeometry::square(k)?;
        if cfg.height < k || cfg.width < k {
            return Err(invalid(format!(
                "{}x{} maps are smaller than a {}x{} kernel",
                cfg.height, cfg.width, k, k
            )));
        }
        let bank = random_bank(&mut rng, cfg.features, cfg.channels, geom, cfg.components)?;
        let input = Tensor4::from_fn(
            cfg.batch,
            cfg.channels,
            cfg.height,
            cfg.width,
            |_, _, _, _| rng.sample(StandardNormal),
        );
        let direct = comp_forward(&input, &bank)?;
        let separable = separable_forward(&input, &bank)?;
        let diff = max_rel_diff(&direct, &separable);
        if diff.is_nan() || diff > EQUALITY_TOL {
            return Err(invalid(format!(
                "separable output deviates from direct output by {:e} at k = {}",
                diff, k
            )));
        }
        let mut td = Vec::with_capacity(cfg.repeats);
        let mut ts = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            td.push(time(|| comp_forward(&input, &bank))?);
            ts.push(time(|| separable_forward(&input, &bank))?);
        }
        let (t_direct, t_separable) = (median(&mut td), median(&mut ts));
        rows.push(BenchRow {
            k,
            t_direct,
            t_separable,
            speedup: t_direct / t_separable,
            max_rel_diff: diff,
        });
    }
    Ok(rows)
}
