//! Browser bindings: edit a compositional filter, run it over a synthetic
//! image, and cut a blob map into positive and negative regions.
//!
//! Parameter lists are flat `f64` arrays, four values per component:
//! `weight, mu_x, mu_y, sigma`. Blob lists use five per blob:
//! `x, y, variance, weight, sign`.

use wasm_bindgen::prelude::*;

use dcn_core::comp_layer::{comp_forward, separable_forward, CompFilterBank};
use dcn_core::data::synth_shapes;
use dcn_core::gaussian::{GaussianComponent, KernelGeometry};
use dcn_core::tensor::Tensor4;
use dcn_core::viz::{graphcut_boundary, render_distribution_maps, ReconGaussian};

fn components(params: &[f64], geom: KernelGeometry) -> Result<Vec<GaussianComponent>, String> {
    if params.is_empty() || !params.len().is_multiple_of(4) {
        return Err(format!(
            "expected 4 values per component, got {}",
            params.len()
        ));
    }
    Ok(params
        .chunks_exact(4)
        .map(|p| {
            let mut c = GaussianComponent::new(p[0], p[1], p[2], p[3]);
            c.project(geom);
            c
        })
        .collect())
}

fn single_bank(k: usize, params: &[f64]) -> Result<CompFilterBank, String> {
    let geom = KernelGeometry::square(k).map_err(|e| e.to_string())?;
    let comps = components(params, geom)?;
    CompFilterBank::new(1, 1, geom, vec![comps], vec![0.0]).map_err(|e| e.to_string())
}

/// Parameters after clamping into the admissible box of a `k x k` kernel.
#[wasm_bindgen]
pub fn project_params(k: usize, params: &[f64]) -> Result<Vec<f64>, String> {
    let geom = KernelGeometry::square(k).map_err(|e| e.to_string())?;
    Ok(components(params, geom)?
        .iter()
        .flat_map(|c| [c.weight, c.mu_x, c.mu_y, c.sigma])
        .collect())
}

/// The dense `k x k` filter, row-major.
#[wasm_bindgen]
pub fn filter_kernel(k: usize, params: &[f64]) -> Result<Vec<f64>, String> {
    let bank = single_bank(k, params)?;
    Ok(dcn_core::gaussian::materialize_bank(&bank).weights)
}

/// A grayscale shape of class `class` (0 to 5), row-major in `[0, 1]`.
#[wasm_bindgen]
pub fn shape_image(
    seed: u64,
    class: usize,
    width: usize,
    height: usize,
) -> Result<Vec<f64>, String> {
    let set = synth_shapes(seed, 6, 6, width, height).map_err(|e| e.to_string())?;
    let i = set.labels.iter().position(|&l| l == class % 6).unwrap_or(0);
    Ok(set.images.plane(i, 0).to_vec())
}

/// Valid-mode response of the filter to `image`. The output is
/// `(width - k + 1) x (height - k + 1)`, computed on the separable path;
/// the last element holds the largest deviation from the direct path.
#[wasm_bindgen]
pub fn filter_response(
    image: &[f64],
    width: usize,
    height: usize,
    k: usize,
    params: &[f64],
) -> Result<Vec<f64>, String> {
    if width < k || height < k {
        return Err(format!(
            "{}x{} image is smaller than a {}x{} kernel",
            width, height, k, k
        ));
    }
    let bank = single_bank(k, params)?;
    let input =
        Tensor4::from_vec(1, 1, height, width, image.to_vec()).map_err(|e| e.to_string())?;
    let fast = separable_forward(&input, &bank).map_err(|e| e.to_string())?;
    let direct = comp_forward(&input, &bank).map_err(|e| e.to_string())?;
    let mut out = fast.data().to_vec();
    out.push(dcn_core::bench::max_rel_diff(&fast, &direct));
    Ok(out)
}

/// Renders blobs on a `width x height` grid, with positions relative to the
/// grid centre, and separates them with
/// the graph cut. Returns `3 * width * height` values: the signed map, the
/// positive-side mask (0 or 1) and the boundary strength.
#[wasm_bindgen]
pub fn cut_blobs(width: usize, height: usize, blobs: &[f64]) -> Result<Vec<f64>, String> {
    if !blobs.len().is_multiple_of(5) {
        return Err(format!("expected 5 values per blob, got {}", blobs.len()));
    }
    let recons: Vec<ReconGaussian> = blobs
        .chunks_exact(5)
        .map(|b| ReconGaussian {
            pos: (b[0], b[1]),
            var: b[2].max(1e-3),
            weight: b[3].abs(),
            sign: if b[4] < 0.0 { -1 } else { 1 },
            var_path: vec![b[2]],
        })
        .collect();
    let maps = render_distribution_maps(&recons, width, height).map_err(|e| e.to_string())?;
    let cut = graphcut_boundary(&maps).map_err(|e| e.to_string())?;
    let mut out = maps.difference();
    out.extend(cut.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }));
    out.extend(cut.boundary);
    Ok(out)
}
