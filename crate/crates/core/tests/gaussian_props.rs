use dcn_core::comp_layer::{comp_forward, separable_forward, CompFilterBank};
use dcn_core::gaussian::{
    d_kernel_d_mu, d_kernel_d_sigma, materialize, materialize_bank, separable_factors, unit_kernel,
    GaussianComponent, KernelGeometry,
};
use dcn_core::tensor::{conv2d_valid, Tensor4};
use proptest::prelude::*;

/// Component with an admissible mean and sigma for the given kernel sides.
fn component(kw: usize, kh: usize) -> impl Strategy<Value = (KernelGeometry, GaussianComponent)> {
    let geom = KernelGeometry::new(kw, kh).unwrap();
    let (x0, x1) = geom.mu_x_range();
    let (y0, y1) = geom.mu_y_range();
    (-2.0..2.0f64, x0..=x1, y0..=y1, 0.501..4.0f64)
        .prop_map(move |(w, mx, my, s)| (geom, GaussianComponent::new(w, mx, my, s)))
}

fn any_component() -> impl Strategy<Value = (KernelGeometry, GaussianComponent)> {
    (4usize..16, 4usize..16).prop_flat_map(|(kw, kh)| component(kw, kh))
}

/// Straight from the definition, written independently of the library.
fn oracle_unit(geom: KernelGeometry, c: &GaussianComponent) -> Vec<f64> {
    let mut g = Vec::new();
    for y in 0..geom.kh {
        for x in 0..geom.kw {
            let r2 = (x as f64 - c.mu_x).powi(2) + (y as f64 - c.mu_y).powi(2);
            g.push((-r2 / (2.0 * c.sigma * c.sigma)).exp());
        }
    }
    let n: f64 = g.iter().sum();
    g.iter().map(|v| v / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn unit_kernel_sums_to_one((geom, c) in any_component()) {
        let s: f64 = unit_kernel(&c, geom).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn derivative_kernels_sum_to_zero((geom, c) in any_component()) {
        let (dx, dy) = d_kernel_d_mu(&c, geom);
        let ds = d_kernel_d_sigma(&c, geom);
        for k in [dx, dy, ds] {
            prop_assert!(k.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn unit_kernel_matches_definition((geom, c) in any_component()) {
        let lib = unit_kernel(&c, geom);
        for (a, b) in lib.iter().zip(oracle_unit(geom, &c)) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        let m = materialize(&c, geom);
        for (a, b) in m.iter().zip(&lib) {
            prop_assert!((a - c.weight * b).abs() <= 1e-15);
        }
    }

    #[test]
    fn derivative_kernels_match_finite_differences((geom, c) in any_component()) {
        let h = 1e-6;
        let fd = |plus: GaussianComponent, minus: GaussianComponent| -> Vec<f64> {
            materialize(&plus, geom)
                .iter()
                .zip(materialize(&minus, geom))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect()
        };
        let shift = |dx: f64, dy: f64, ds: f64| GaussianComponent {
            mu_x: c.mu_x + dx,
            mu_y: c.mu_y + dy,
            sigma: c.sigma + ds,
            ..c
        };
        let (dx, dy) = d_kernel_d_mu(&c, geom);
        let ds = d_kernel_d_sigma(&c, geom);
        let pairs = [
            (dx, fd(shift(h, 0.0, 0.0), shift(-h, 0.0, 0.0))),
            (dy, fd(shift(0.0, h, 0.0), shift(0.0, -h, 0.0))),
            (ds, fd(shift(0.0, 0.0, h), shift(0.0, 0.0, -h))),
        ];
        for (analytic, numeric) in pairs {
            let scale = analytic.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
            for (a, n) in analytic.iter().zip(&numeric) {
                prop_assert!((a - n).abs() <= 1e-6 * scale, "{} vs {}", a, n);
            }
        }
    }

    #[test]
    fn separable_factors_rebuild_the_kernel((geom, c) in any_component()) {
        let f = separable_factors(&c, geom);
        prop_assert_eq!(f.row.len(), geom.kw);
        prop_assert_eq!(f.col.len(), geom.kh);
        for (a, b) in f.outer().iter().zip(materialize(&c, geom)) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn projection_is_idempotent_and_admissible(
        (kw, kh) in (4usize..12, 4usize..12),
        mx in -5.0..15.0f64,
        my in -5.0..15.0f64,
        s in -1.0..5.0f64,
    ) {
        let geom = KernelGeometry::new(kw, kh).unwrap();
        let mut c = GaussianComponent::new(0.3, mx, my, s);
        c.project(geom);
        prop_assert!(c.validate(geom).is_ok());
        let once = c;
        c.project(geom);
        prop_assert_eq!(c, once);
    }

    #[test]
    fn materialization_is_linear_in_weight((geom, c) in any_component(), a in -3.0..3.0f64) {
        let scaled = GaussianComponent { weight: a * c.weight, ..c };
        for (x, y) in materialize(&scaled, geom).iter().zip(materialize(&c, geom)) {
            prop_assert!((x - a * y).abs() <= 1e-14 * (1.0 + y.abs()));
        }
    }
}

fn random_layer(seed: u64) -> (Tensor4, CompFilterBank) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let geom = KernelGeometry::new(rng.random_range(4..10), rng.random_range(4..10)).unwrap();
    let g = rng.random_range(1..6);
    let bank = dcn_core::bench::random_bank(&mut rng, 3, 2, geom, g).unwrap();
    let input = Tensor4::from_fn(2, 2, 14, 13, |_, _, _, _| rng.random_range(-1.0..1.0));
    (input, bank)
}

#[test]
fn forward_is_convolution_of_materialized_bank() {
    for seed in 0..20 {
        let (input, bank) = random_layer(seed);
        let a = comp_forward(&input, &bank).unwrap();
        let b = conv2d_valid(&input, &materialize_bank(&bank)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn separable_path_matches_direct_path() {
    for seed in 0..50 {
        let (input, bank) = random_layer(seed);
        let a = comp_forward(&input, &bank).unwrap();
        let b = separable_forward(&input, &bank).unwrap();
        assert!(dcn_core::bench::max_rel_diff(&a, &b) <= 1e-10);
    }
}
