//! The Gaussian component: a weighted 2D Gaussian blob living on a discrete
//! kernel tap grid, normalized by its sum over that grid rather than by the
//! continuous `2 pi sigma^2` factor.
//!
//! Taps are indexed `(x, y)` with `x in 0..kw` (column) and `y in 0..kh`
//! (row); kernels are stored row-major as `y * kw + x`. Means share the same
//! continuous frame.

use crate::comp_layer::CompFilterBank;
use crate::error::{invalid, Result};
use crate::tensor::DenseFilterBank;

/// Minimum distance of a component mean from the kernel border.
pub const MEAN_MARGIN: f64 = 1.5;
/// Standard deviations must stay strictly above this value.
pub const SIGMA_FLOOR: f64 = 0.5;

/// Size of a compositional kernel in taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelGeometry {
    pub kw: usize,
    pub kh: usize,
}

impl KernelGeometry {
    /// Kernels need at least 4 taps per axis so the admissible mean range
    /// `[1.5, k - 2.5]` is non-empty.
    pub fn new(kw: usize, kh: usize) -> Result<Self> {
        if kw < 4 || kh < 4 {
            return Err(invalid(format!(
                "compositional kernels must be at least 4x4, got {}x{}",
                kw, kh
            )));
        }
        Ok(KernelGeometry { kw, kh })
    }

    pub fn square(k: usize) -> Result<Self> {
        Self::new(k, k)
    }

    pub fn taps(&self) -> usize {
        self.kw * self.kh
    }

    /// Admissible range for the x coordinate of a mean.
    pub fn mu_x_range(&self) -> (f64, f64) {
        (MEAN_MARGIN, self.kw as f64 - 1.0 - MEAN_MARGIN)
    }

    pub fn mu_y_range(&self) -> (f64, f64) {
        (MEAN_MARGIN, self.kh as f64 - 1.0 - MEAN_MARGIN)
    }

    /// `((kw - 1) / 2, (kh - 1) / 2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.kw as f64 - 1.0) / 2.0, (self.kh as f64 - 1.0) / 2.0)
    }
}

/// One weighted isotropic Gaussian inside a kernel window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianComponent {
    /// Unconstrained mixing weight; negative values encode absence.
    pub weight: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mu_x: f64, mu_y: f64, sigma: f64) -> Self {
        GaussianComponent {
            weight,
            mu_x,
            mu_y,
            sigma,
        }
    }

    /// Checks the mean box and the standard-deviation floor for `geom`.
    pub fn validate(&self, geom: KernelGeometry) -> Result<()> {
        let (x0, x1) = geom.mu_x_range();
        let (y0, y1) = geom.mu_y_range();
        if !(self.weight.is_finite() && self.mu_x.is_finite() && self.mu_y.is_finite()) {
            return Err(invalid(format!("non-finite component {:?}", self)));
        }
        if !(self.sigma > SIGMA_FLOOR && self.sigma.is_finite()) {
            return Err(invalid(format!(
                "component sigma {} must exceed {}",
                self.sigma, SIGMA_FLOOR
            )));
        }
        if self.mu_x < x0 || self.mu_x > x1 || self.mu_y < y0 || self.mu_y > y1 {
            return Err(invalid(format!(
                "component mean ({}, {}) outside [{}, {}]x[{}, {}]",
                self.mu_x, self.mu_y, x0, x1, y0, y1
            )));
        }
        Ok(())
    }

    /// Clamps the mean into the admissible box and sigma onto its floor.
    pub fn project(&mut self, geom: KernelGeometry) {
        let (x0, x1) = geom.mu_x_range();
        let (y0, y1) = geom.mu_y_range();
        self.mu_x = self.mu_x.clamp(x0, x1);
        self.mu_y = self.mu_y.clamp(y0, y1);
        self.sigma = self.sigma.max(SIGMA_FLOOR + 1e-3);
    }
}

/// Unnormalized Gaussian `exp(-|x - mu|^2 / (2 sigma^2))`.
#[inline]
pub fn g_unnorm(x: (f64, f64), mu: (f64, f64), sigma: f64) -> f64 {
    let dx = x.0 - mu.0;
    let dy = x.1 - mu.1;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Sum of [`g_unnorm`] over every tap of the kernel grid.
pub fn normalizer(geom: KernelGeometry, mu: (f64, f64), sigma: f64) -> f64 {
    let mut sum = 0.0;
    for y in 0..geom.kh {
        for x in 0..geom.kw {
            sum += g_unnorm((x as f64, y as f64), mu, sigma);
        }
    }
    sum
}

fn unnormalized_grid(geom: KernelGeometry, mu: (f64, f64), sigma: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(geom.taps());
    for y in 0..geom.kh {
        for x in 0..geom.kw {
            g.push(g_unnorm((x as f64, y as f64), mu, sigma));
        }
    }
    g
}

/// The grid-normalized Gaussian of `comp` without its weight; sums to 1.
pub fn unit_kernel(comp: &GaussianComponent, geom: KernelGeometry) -> Vec<f64> {
    let mut g = unnormalized_grid(geom, (comp.mu_x, comp.mu_y), comp.sigma);
    let norm: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= norm;
    }
    g
}

/// Dense `kh x kw` kernel of one weighted component. Entries sum to the
/// component weight.
pub fn materialize(comp: &GaussianComponent, geom: KernelGeometry) -> Vec<f64> {
    let mut g = unit_kernel(comp, geom);
    for v in g.iter_mut() {
        *v *= comp.weight;
    }
    g
}

/// Adds the kernel of `comp` into `out`.
pub fn materialize_into(comp: &GaussianComponent, geom: KernelGeometry, out: &mut [f64]) {
    let g = unnormalized_grid(geom, (comp.mu_x, comp.mu_y), comp.sigma);
    let scale = comp.weight / g.iter().sum::<f64>();
    for (o, v) in out.iter_mut().zip(g) {
        *o += scale * v;
    }
}

/// Sums the components of every `(feature, channel)` group into one dense
/// kernel; biases are copied through.
pub fn materialize_bank(bank: &CompFilterBank) -> DenseFilterBank {
    let geom = bank.geometry();
    let taps = geom.taps();
    let mut weights = vec![0.0; bank.features() * bank.channels() * taps];
    for f in 0..bank.features() {
        for s in 0..bank.channels() {
            let start = (f * bank.channels() + s) * taps;
            for comp in bank.group(f, s) {
                materialize_into(comp, geom, &mut weights[start..start + taps]);
            }
        }
    }
    DenseFilterBank {
        f: bank.features(),
        s: bank.channels(),
        kh: geom.kh,
        kw: geom.kw,
        weights,
        bias: bank.bias().to_vec(),
    }
}

/// Quotient-rule derivative `w (N dg - g dN) / N^2` for one parameter,
/// given `g` on the grid and its partial derivative `dg`.
fn quotient_rule(weight: f64, g: &[f64], dg: &[f64]) -> Vec<f64> {
    let n: f64 = g.iter().sum();
    let dn: f64 = dg.iter().sum();
    g.iter()
        .zip(dg)
        .map(|(&gi, &dgi)| weight * (n * dgi - gi * dn) / (n * n))
        .collect()
}

/// Derivatives of the materialized kernel with respect to `mu_x` and `mu_y`.
pub fn d_kernel_d_mu(comp: &GaussianComponent, geom: KernelGeometry) -> (Vec<f64>, Vec<f64>) {
    let g = unnormalized_grid(geom, (comp.mu_x, comp.mu_y), comp.sigma);
    let s2 = comp.sigma * comp.sigma;
    let mut dgx = Vec::with_capacity(g.len());
    let mut dgy = Vec::with_capacity(g.len());
    for y in 0..geom.kh {
        for x in 0..geom.kw {
            let gi = g[y * geom.kw + x];
            dgx.push(gi * (x as f64 - comp.mu_x) / s2);
            dgy.push(gi * (y as f64 - comp.mu_y) / s2);
        }
    }
    (
        quotient_rule(comp.weight, &g, &dgx),
        quotient_rule(comp.weight, &g, &dgy),
    )
}

/// Derivative of the materialized kernel with respect to `sigma`.
pub fn d_kernel_d_sigma(comp: &GaussianComponent, geom: KernelGeometry) -> Vec<f64> {
    let g = unnormalized_grid(geom, (comp.mu_x, comp.mu_y), comp.sigma);
    let s3 = comp.sigma * comp.sigma * comp.sigma;
    let mut dg = Vec::with_capacity(g.len());
    for y in 0..geom.kh {
        for x in 0..geom.kw {
            let dx = x as f64 - comp.mu_x;
            let dy = y as f64 - comp.mu_y;
            dg.push(g[y * geom.kw + x] * (dx * dx + dy * dy) / s3);
        }
    }
    quotient_rule(comp.weight, &g, &dg)
}

/// A component written as `scale * outer(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableFactors {
    /// Horizontal 1D Gaussian, length `kw`.
    pub row: Vec<f64>,
    /// Vertical 1D Gaussian, length `kh`.
    pub col: Vec<f64>,
    pub scale: f64,
}

impl SeparableFactors {
    pub fn outer(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.row.len() * self.col.len());
        for &c in &self.col {
            for &r in &self.row {
                k.push(self.scale * c * r);
            }
        }
        k
    }
}

fn gauss_1d(len: usize, mu: f64, sigma: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let d = i as f64 - mu;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Exact axis factorization of a component. The grid normalizer factors as
/// `sum(row) * sum(col)`, so no approximation is involved.
pub fn separable_factors(comp: &GaussianComponent, geom: KernelGeometry) -> SeparableFactors {
    let row = gauss_1d(geom.kw, comp.mu_x, comp.sigma);
    let col = gauss_1d(geom.kh, comp.mu_y, comp.sigma);
    let norm = row.iter().sum::<f64>() * col.iter().sum::<f64>();
    SeparableFactors {
        row,
        col,
        scale: comp.weight / norm,
    }
}

/// Reverses every kernel of the bank along both spatial axes.
pub fn rotate180(bank: &DenseFilterBank) -> DenseFilterBank {
    let mut out = bank.clone();
    let k = bank.kernel_len();
    for chunk in out.weights.chunks_mut(k) {
        chunk.reverse();
    }
    out
}

/// Rotates a single `kh x kw` kernel in place.
pub fn rotate_kernel180(kernel: &mut [f64]) {
    kernel.reverse();
}

/// Mean position reflected through the kernel center, i.e. the mean of the
/// rotated component.
pub fn reflect_mean(comp: &GaussianComponent, geom: KernelGeometry) -> GaussianComponent {
    GaussianComponent {
        mu_x: geom.kw as f64 - 1.0 - comp.mu_x,
        mu_y: geom.kh as f64 - 1.0 - comp.mu_y,
        ..*comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(k: usize) -> KernelGeometry {
        KernelGeometry::square(k).unwrap()
    }

    #[test]
    fn geometry_needs_four_taps() {
        assert!(KernelGeometry::new(3, 7).is_err());
        assert!(KernelGeometry::new(4, 4).is_ok());
        assert_eq!(geom(9).mu_x_range(), (1.5, 6.5));
    }

    #[test]
    fn g_unnorm_values() {
        assert_eq!(g_unnorm((2.0, 3.0), (2.0, 3.0), 0.7), 1.0);
        let mu = (2.3, 1.9);
        let a = g_unnorm((mu.0 + 0.4, mu.1 - 1.1), mu, 1.3);
        let b = g_unnorm((mu.0 - 0.4, mu.1 + 1.1), mu, 1.3);
        assert_eq!(a, b);
        let v = g_unnorm((0.0, 0.0), (1.5, 1.5), 1.0);
        assert!((v - (-2.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn normalizer_factorizes_and_collapses() {
        let g = KernelGeometry::new(7, 5).unwrap();
        let (mu, sigma) = ((2.7, 1.8), 1.1);
        let sx: f64 = gauss_1d(7, mu.0, sigma).iter().sum();
        let sy: f64 = gauss_1d(5, mu.1, sigma).iter().sum();
        assert!((normalizer(g, mu, sigma) - sx * sy).abs() < 1e-12);
        assert!((normalizer(g, (3.0, 2.0), 0.01) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_matches_double_loop() {
        // independent summation over the 9x9 grid around (4, 4) with sigma 2
        let mut expected = 0.0;
        for i in 0..81 {
            let (x, y) = ((i % 9) as f64, (i / 9) as f64);
            let r2 = (x - 4.0).powi(2) + (y - 4.0).powi(2);
            expected += (-r2 / 8.0).exp();
        }
        let got = normalizer(geom(9), (4.0, 4.0), 2.0);
        assert!((got - expected).abs() < 1e-12);
        // same value written as the square of a 1D sum
        let s1: f64 = (0..9)
            .map(|i| (-((i as f64 - 4.0).powi(2)) / 8.0).exp())
            .sum();
        assert!((got - s1 * s1).abs() < 1e-12);
    }

    #[test]
    fn materialize_sums_to_weight() {
        let g = geom(7);
        assert!(materialize(&GaussianComponent::new(0.0, 3.0, 3.0, 1.0), g)
            .iter()
            .all(|&v| v == 0.0));
        let c = GaussianComponent::new(-1.7, 2.2, 4.1, 0.8);
        let s: f64 = materialize(&c, g).iter().sum();
        assert!((s + 1.7).abs() < 1e-12);
    }

    #[test]
    fn materialize_center_entry() {
        let c = GaussianComponent::new(1.0, 3.0, 3.0, 1.0);
        let k = materialize(&c, geom(7));
        let s1: f64 = (0..7)
            .map(|i| (-((i as f64 - 3.0).powi(2)) / 2.0).exp())
            .sum();
        assert!((k[3 * 7 + 3] - 1.0 / (s1 * s1)).abs() < 1e-15);
    }

    #[test]
    fn derivative_kernels_sum_to_zero() {
        let g = geom(9);
        let c = GaussianComponent::new(0.9, 2.4, 5.6, 1.3);
        let (dx, dy) = d_kernel_d_mu(&c, g);
        let ds = d_kernel_d_sigma(&c, g);
        assert!(dx.iter().sum::<f64>().abs() < 1e-12);
        assert!(dy.iter().sum::<f64>().abs() < 1e-12);
        assert!(ds.iter().sum::<f64>().abs() < 1e-12);
        let zero = GaussianComponent::new(0.0, 2.4, 5.6, 1.3);
        assert!(d_kernel_d_sigma(&zero, g).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mu_x_derivative_is_antisymmetric_at_center() {
        let g = geom(7);
        let (dx, _) = d_kernel_d_mu(&GaussianComponent::new(1.0, 3.0, 3.0, 1.2), g);
        for y in 0..7 {
            for x in 0..7 {
                let mirrored = dx[y * 7 + (6 - x)];
                assert!((dx[y * 7 + x] + mirrored).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn separable_outer_is_exact() {
        let g = KernelGeometry::new(9, 6).unwrap();
        let c = GaussianComponent::new(1.0, 3.3, 2.1, 1.7);
        let f = separable_factors(&c, g);
        for (a, b) in f.outer().iter().zip(materialize(&c, g)) {
            assert!((a - b).abs() <= 1e-14);
        }
        let zero = GaussianComponent::new(0.0, 3.3, 2.1, 1.7);
        assert_eq!(separable_factors(&zero, g).scale, 0.0);
    }

    #[test]
    fn rotation_reflects_mean() {
        let g = geom(7);
        let c = GaussianComponent::new(1.3, 2.0, 4.25, 0.9);
        let mut k = materialize(&c, g);
        rotate_kernel180(&mut k);
        let r = materialize(&reflect_mean(&c, g), g);
        for (a, b) in k.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
        let centered = materialize(&GaussianComponent::new(1.0, 3.0, 3.0, 1.0), g);
        let mut rotated = centered.clone();
        rotate_kernel180(&mut rotated);
        assert_eq!(rotated, centered);
    }

    #[test]
    fn projection_clamps() {
        let g = geom(9);
        let mut c = GaussianComponent::new(0.3, -3.0, 99.0, 0.2);
        c.project(g);
        assert_eq!((c.mu_x, c.mu_y), (1.5, 6.5));
        assert!((c.sigma - 0.501).abs() < 1e-15);
        assert_eq!(c.weight, 0.3);
        assert!(c.validate(g).is_ok());
    }
}
