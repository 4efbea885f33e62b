//! Compositional convolution layer and the dense baseline layer.
//!
//! Forward passes go through the materialized dense kernels, so the
//! compositional layer shares every numeric path with the plain CNN layer.
//! Parameter gradients are obtained by projecting the dense weight gradient
//! onto each component's kernel and its partial-derivative kernels:
//! `sum(dC/dZ * (X (*) K)) == <corr(X, dC/dZ), K>` for any kernel `K`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::gaussian::{
    self, d_kernel_d_mu, d_kernel_d_sigma, separable_factors, unit_kernel, GaussianComponent,
    KernelGeometry, SIGMA_FLOOR,
};
use crate::tensor::{
    axpy, conv2d_input_grad, conv2d_valid, conv2d_weight_grad, dot, DenseFilterBank, Tensor4,
};

/// Compositional filters for one layer: a list of Gaussian components for
/// every `(feature, channel)` pair, plus one bias per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct CompFilterBank {
    f: usize,
    s: usize,
    geom: KernelGeometry,
    /// Indexed `f * s_count + s`.
    groups: Vec<Vec<GaussianComponent>>,
    bias: Vec<f64>,
}

impl CompFilterBank {
    pub fn new(
        f: usize,
        s: usize,
        geom: KernelGeometry,
        groups: Vec<Vec<GaussianComponent>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if groups.len() != f * s {
            return Err(invalid(format!(
                "{} component groups for {} features x {} channels",
                groups.len(),
                f,
                s
            )));
        }
        if bias.len() != f {
            return Err(invalid(format!("{} biases for {} features", bias.len(), f)));
        }
        let bank = CompFilterBank {
            f,
            s,
            geom,
            groups,
            bias,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Means on a `grid_x x grid_y` lattice of cell centers inside the
    /// admissible box, sigma at half the lattice spacing, zero biases.
    /// Weights are zero-mean normal with the deviation from
    /// [`init_weight_std`].
    pub fn init<R: Rng + ?Sized>(
        f: usize,
        s: usize,
        geom: KernelGeometry,
        grid: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (gx, gy) = grid;
        if gx == 0 || gy == 0 {
            return Err(invalid("component grid must be at least 1x1"));
        }
        let (x0, x1) = geom.mu_x_range();
        let (y0, y1) = geom.mu_y_range();
        let (sx, sy) = ((x1 - x0) / gx as f64, (y1 - y0) / gy as f64);
        let sigma = (0.5 * sx.min(sy)).max(SIGMA_FLOOR + 1e-3);
        let mut template = Vec::with_capacity(gx * gy);
        for j in 0..gy {
            for i in 0..gx {
                template.push(GaussianComponent::new(
                    1.0,
                    x0 + sx * (i as f64 + 0.5),
                    y0 + sy * (j as f64 + 0.5),
                    sigma,
                ));
            }
        }
        let std = init_weight_std(s, &template, geom);
        let normal = Normal::new(0.0, std).expect("valid deviation");
        let groups = (0..f * s)
            .map(|_| {
                template
                    .iter()
                    .map(|c| GaussianComponent {
                        weight: normal.sample(rng),
                        ..*c
                    })
                    .collect()
            })
            .collect();
        Self::new(f, s, geom, groups, vec![0.0; f])
    }

    pub fn validate(&self) -> Result<()> {
        for (i, group) in self.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(invalid(format!(
                    "group (feature {}, channel {}) has no components",
                    i / self.s,
                    i % self.s
                )));
            }
            for comp in group {
                comp.validate(self.geom)?;
            }
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("non-finite bias"));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.f
    }

    pub fn channels(&self) -> usize {
        self.s
    }

    pub fn geometry(&self) -> KernelGeometry {
        self.geom
    }

    pub fn group(&self, f: usize, s: usize) -> &[GaussianComponent] {
        &self.groups[f * self.s + s]
    }

    pub fn group_mut(&mut self, f: usize, s: usize) -> &mut Vec<GaussianComponent> {
        &mut self.groups[f * self.s + s]
    }

    pub fn groups(&self) -> &[Vec<GaussianComponent>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Vec<GaussianComponent>] {
        &mut self.groups
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn component_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn components(&self) -> impl Iterator<Item = &GaussianComponent> {
        self.groups.iter().flatten()
    }

    pub fn components_mut(&mut self) -> impl Iterator<Item = &mut GaussianComponent> {
        self.groups.iter_mut().flatten()
    }

    /// Clamps every mean into the admissible box and every sigma onto its
    /// floor. Weights and biases are left alone.
    pub fn project_constraints(&mut self) {
        let geom = self.geom;
        for comp in self.components_mut() {
            comp.project(geom);
        }
    }

    pub fn projected(&self) -> Self {
        let mut out = self.clone();
        out.project_constraints();
        out
    }

    /// Same bank with every component weight multiplied by `a`.
    pub fn scaled_weights(&self, a: f64) -> Self {
        let mut out = self.clone();
        for comp in out.components_mut() {
            comp.weight *= a;
        }
        out
    }
}

/// Fan-in scaled deviation for component weights: the materialized filters
/// get the same expected energy `2 / s` per kernel as a He-initialized dense
/// kernel over `s` input channels.
pub fn init_weight_std(s: usize, template: &[GaussianComponent], geom: KernelGeometry) -> f64 {
    let energy: f64 = template
        .iter()
        .map(|c| unit_kernel(c, geom).iter().map(|v| v * v).sum::<f64>())
        .sum();
    (2.0 / (s as f64 * energy)).sqrt()
}

/// Gradient of one component's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComponentGrad {
    pub weight: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma: f64,
}

/// Parameter gradients for a [`CompFilterBank`], same layout as the bank.
#[derive(Clone, Debug, PartialEq)]
pub struct CompLayerGrads {
    pub groups: Vec<Vec<ComponentGrad>>,
    pub bias: Vec<f64>,
}

/// `conv2d_valid` on the materialized bank.
pub fn comp_forward(input: &Tensor4, bank: &CompFilterBank) -> Result<Tensor4> {
    if input.c() != bank.channels() {
        return Err(invalid(format!(
            "input has {} channels, bank expects {}",
            input.c(),
            bank.channels()
        )));
    }
    conv2d_valid(input, &gaussian::materialize_bank(bank))
}

fn check_grad_shape(input: &Tensor4, grad_z: &Tensor4, bank: &CompFilterBank) -> Result<()> {
    let geom = bank.geometry();
    let ok = input.c() == bank.channels()
        && input.h() >= geom.kh
        && input.w() >= geom.kw
        && grad_z.dims()
            == [
                input.n(),
                bank.features(),
                input.h() - geom.kh + 1,
                input.w() - geom.kw + 1,
            ];
    if ok {
        Ok(())
    } else {
        Err(invalid(format!(
            "gradient {:?} does not match the forward output for input {:?}",
            grad_z.dims(),
            input.dims()
        )))
    }
}

/// Projects dense per-tap weight gradients onto the component parameters.
pub fn project_dense_grad(
    bank: &CompFilterBank,
    dense_dw: &[f64],
    dense_db: &[f64],
) -> CompLayerGrads {
    let geom = bank.geometry();
    let taps = geom.taps();
    let mut groups = Vec::with_capacity(bank.groups().len());
    for f in 0..bank.features() {
        for s in 0..bank.channels() {
            let start = (f * bank.channels() + s) * taps;
            let dw = &dense_dw[start..start + taps];
            let grads = bank
                .group(f, s)
                .iter()
                .map(|comp| {
                    let (dmx, dmy) = d_kernel_d_mu(comp, geom);
                    ComponentGrad {
                        weight: dot(dw, &unit_kernel(comp, geom)),
                        mu_x: dot(dw, &dmx),
                        mu_y: dot(dw, &dmy),
                        sigma: dot(dw, &d_kernel_d_sigma(comp, geom)),
                    }
                })
                .collect();
            groups.push(grads);
        }
    }
    CompLayerGrads {
        groups,
        bias: dense_db.to_vec(),
    }
}

/// Gradients of the loss with respect to every component weight, mean and
/// sigma, and to the biases, given the upstream error `grad_z`.
pub fn comp_backward_params(
    input: &Tensor4,
    grad_z: &Tensor4,
    bank: &CompFilterBank,
) -> Result<CompLayerGrads> {
    check_grad_shape(input, grad_z, bank)?;
    let geom = bank.geometry();
    let (dw, db) = conv2d_weight_grad(input, grad_z, geom.kh, geom.kw)?;
    Ok(project_dense_grad(bank, &dw, &db))
}

/// Error propagated to the layer input: `grad_z` fully correlated with the
/// rotated materialized filters and summed over features.
pub fn comp_backward_input(grad_z: &Tensor4, bank: &CompFilterBank) -> Result<Tensor4> {
    let geom = bank.geometry();
    if grad_z.c() != bank.features() {
        return Err(invalid(format!(
            "gradient has {} channels, bank has {} features",
            grad_z.c(),
            bank.features()
        )));
    }
    conv2d_input_grad(
        grad_z,
        &gaussian::materialize_bank(bank),
        grad_z.h() + geom.kh - 1,
        grad_z.w() + geom.kw - 1,
    )
}

/// Gradients of the dense baseline layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Tensor4,
}

pub fn dense_layer_forward(input: &Tensor4, bank: &DenseFilterBank) -> Result<Tensor4> {
    conv2d_valid(input, bank)
}

pub fn dense_layer_backward(
    input: &Tensor4,
    grad_z: &Tensor4,
    bank: &DenseFilterBank,
) -> Result<DenseGrads> {
    if input.c() != bank.s || grad_z.c() != bank.f {
        return Err(invalid(format!(
            "dense layer gradient {:?} / input {:?} do not match a {}->{} bank",
            grad_z.dims(),
            input.dims(),
            bank.s,
            bank.f
        )));
    }
    let (weights, bias) = conv2d_weight_grad(input, grad_z, bank.kh, bank.kw)?;
    let input_grad = conv2d_input_grad(grad_z, bank, input.h(), input.w())?;
    Ok(DenseGrads {
        weights,
        bias,
        input: input_grad,
    })
}

/// Forward pass computed with two 1D passes per component instead of one 2D
/// convolution per `(feature, channel)` kernel. Exact, not an approximation.
pub fn separable_forward(input: &Tensor4, bank: &CompFilterBank) -> Result<Tensor4> {
    let geom = bank.geometry();
    if input.c() != bank.channels() || input.h() < geom.kh || input.w() < geom.kw {
        return Err(invalid(format!(
            "input {:?} incompatible with a {}-channel {}x{} bank",
            input.dims(),
            bank.channels(),
            geom.kh,
            geom.kw
        )));
    }
    let (h, w) = (input.h(), input.w());
    let (oh, ow) = (h - geom.kh + 1, w - geom.kw + 1);
    let factors: Vec<Vec<_>> = bank
        .groups()
        .iter()
        .map(|g| g.iter().map(|c| separable_factors(c, geom)).collect())
        .collect();
    let mut out = Tensor4::zeros(input.n(), bank.features(), oh, ow);
    let mut tmp = vec![0.0; h * ow];
    for n in 0..input.n() {
        for f in 0..bank.features() {
            let plane = out.plane_mut(n, f);
            plane.fill(bank.bias()[f]);
            for s in 0..bank.channels() {
                let src = input.plane(n, s);
                for fac in &factors[f * bank.channels() + s] {
                    // horizontal pass over every input row
                    tmp.fill(0.0);
                    for y in 0..h {
                        let t = &mut tmp[y * ow..(y + 1) * ow];
                        for (dx, &r) in fac.row.iter().enumerate() {
                            axpy(r, &src[y * w + dx..y * w + dx + ow], t);
                        }
                    }
                    // vertical pass, scaled into the output
                    for y in 0..oh {
                        let o = &mut plane[y * ow..(y + 1) * ow];
                        for (dy, &c) in fac.col.iter().enumerate() {
                            axpy(fac.scale * c, &tmp[(y + dy) * ow..(y + dy + 1) * ow], o);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
