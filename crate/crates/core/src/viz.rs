//! Mean-reconstruction visualization.
//!
//! A feature is projected top-down to pixel space by following the means of
//! its components through the layer stack. Every leaf becomes a Gaussian blob
//! with accumulated variance and weight; the blobs are summed into positive
//! and negative distribution maps, and a graph cut separates the two.

use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};
use crate::maxflow::FlowGraph;
use crate::network::{Layer, Network};
use crate::pgm;

/// Upscale factor applied to boundary images.
pub const BOUNDARY_UPSCALE: usize = 4;

/// A leaf Gaussian projected into the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconGaussian {
    /// `(x, y)` in pixels, relative to the receptive-field center of the
    /// visualized unit.
    pub pos: (f64, f64),
    /// Sum of the component variances along the path.
    pub var: f64,
    /// Product of the component weight magnitudes along the path.
    pub weight: f64,
    /// Sign of the first-layer component: `+1` or `-1`.
    pub sign: i8,
    /// Cumulative variance after each step, from the top layer down.
    pub var_path: Vec<f64>,
}

/// Step from a conv layer's input frame down to the previous conv layer's
/// output frame.
fn map_down(network: &Network, from: usize, to: usize, pos: (f64, f64)) -> Result<(f64, f64)> {
    let mut p = pos;
    for i in (to + 1..from).rev() {
        match network.layers()[i] {
            Layer::Relu => {}
            Layer::MaxPool { window, stride } => {
                let off = (window as f64 - 1.0) / 2.0;
                p = (stride as f64 * p.0 + off, stride as f64 * p.1 + off);
            }
            _ => {
                return Err(invalid(format!(
                    "layer {} cannot be traversed by mean reconstruction",
                    i + 1
                )))
            }
        }
    }
    Ok(p)
}

fn conv_below(network: &Network, idx: usize) -> Result<Option<usize>> {
    for i in (0..idx).rev() {
        match network.layers()[i] {
            Layer::CompConv(_) => return Ok(Some(i)),
            Layer::Relu | Layer::MaxPool { .. } => {}
            _ => {
                return Err(invalid(format!(
                    "layer {} is not compositional; cannot reconstruct through it",
                    i + 1
                )))
            }
        }
    }
    Ok(None)
}

fn comp_layer_index(network: &Network, layer: usize) -> Result<usize> {
    let comps = network.comp_layer_indices();
    if layer == 0 || layer > comps.len() {
        return Err(invalid(format!(
            "compositional layer {} requested, network has {}",
            layer,
            comps.len()
        )));
    }
    Ok(comps[layer - 1])
}

/// Position of the receptive-field center of the unit at output position
/// `(0, 0)` of compositional layer `idx`, in input pixels.
fn rf_center(network: &Network, idx: usize) -> Result<(f64, f64)> {
    let Layer::CompConv(bank) = &network.layers()[idx] else {
        unreachable!("index points at a compositional layer")
    };
    let c = bank.geometry().center();
    match conv_below(network, idx)? {
        None => Ok(c),
        Some(below) => {
            let p = map_down(network, idx, below, c)?;
            let inner = rf_center(network, below)?;
            Ok((p.0 + inner.0, p.1 + inner.1))
        }
    }
}

/// `(width, height)` of the receptive field of one unit of compositional
/// layer `layer` (1-based).
pub fn receptive_field(network: &Network, layer: usize) -> Result<(usize, usize)> {
    let idx = comp_layer_index(network, layer)?;
    let (mut w, mut h) = (1usize, 1usize);
    for i in (0..=idx).rev() {
        match &network.layers()[i] {
            Layer::CompConv(b) => {
                w += b.geometry().kw - 1;
                h += b.geometry().kh - 1;
            }
            Layer::MaxPool { window, stride } => {
                w = (w - 1) * stride + window;
                h = (h - 1) * stride + window;
            }
            Layer::Relu => {}
            _ => return Err(invalid("receptive field crosses a non-compositional layer")),
        }
    }
    Ok((w, h))
}

#[allow(clippy::too_many_arguments)]
fn expand(
    network: &Network,
    idx: usize,
    feature: usize,
    pos: (f64, f64),
    var: f64,
    weight: f64,
    var_path: &mut Vec<f64>,
    out: &mut Vec<ReconGaussian>,
) -> Result<()> {
    let Layer::CompConv(bank) = &network.layers()[idx] else {
        unreachable!("index points at a compositional layer")
    };
    let below = conv_below(network, idx)?;
    for s in 0..bank.channels() {
        for comp in bank.group(feature, s) {
            // above the first layer only components requesting presence count
            if below.is_some() && comp.weight <= 0.0 {
                continue;
            }
            let p = (pos.0 + comp.mu_x, pos.1 + comp.mu_y);
            let v = var + comp.sigma * comp.sigma;
            let w = weight * comp.weight.abs();
            var_path.push(v);
            match below {
                None => out.push(ReconGaussian {
                    pos: p,
                    var: v,
                    weight: w,
                    sign: if comp.weight < 0.0 { -1 } else { 1 },
                    var_path: var_path.clone(),
                }),
                Some(b) => {
                    let q = map_down(network, idx, b, p)?;
                    expand(network, b, s, q, v, w, var_path, out)?;
                }
            }
            var_path.pop();
        }
    }
    Ok(())
}

/// Projects feature `feature` of compositional layer `layer` (1-based) down
/// to pixel space.
pub fn mean_reconstruct(
    network: &Network,
    layer: usize,
    feature: usize,
) -> Result<Vec<ReconGaussian>> {
    let idx = comp_layer_index(network, layer)?;
    let Layer::CompConv(bank) = &network.layers()[idx] else {
        unreachable!()
    };
    if feature >= bank.features() {
        return Err(invalid(format!(
            "feature {} requested, layer has {}",
            feature,
            bank.features()
        )));
    }
    let mut out = Vec::new();
    expand(
        network,
        idx,
        feature,
        (0.0, 0.0),
        0.0,
        1.0,
        &mut Vec::new(),
        &mut out,
    )?;
    let c = rf_center(network, idx)?;
    for r in &mut out {
        r.pos = (r.pos.0 - c.0, r.pos.1 - c.1);
    }
    Ok(out)
}

/// Summed positive and negative blobs on a pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionMap {
    pub width: usize,
    pub height: usize,
    pub pos_map: Vec<f64>,
    pub neg_map: Vec<f64>,
}

impl DistributionMap {
    /// `pos_map - neg_map`.
    pub fn difference(&self) -> Vec<f64> {
        self.pos_map
            .iter()
            .zip(&self.neg_map)
            .map(|(p, n)| p - n)
            .collect()
    }
}

/// Pixel `(x, y)` of the grid in the frame of [`ReconGaussian::pos`]: the
/// grid center sits at the origin.
pub fn pixel_coord(x: usize, y: usize, width: usize, height: usize) -> (f64, f64) {
    (
        x as f64 - (width as f64 - 1.0) / 2.0,
        y as f64 - (height as f64 - 1.0) / 2.0,
    )
}

pub fn render_distribution_maps(
    recons: &[ReconGaussian],
    width: usize,
    height: usize,
) -> Result<DistributionMap> {
    if width == 0 || height == 0 {
        return Err(invalid("map dims must be positive"));
    }
    let mut pos_map = vec![0.0; width * height];
    let mut neg_map = vec![0.0; width * height];
    for r in recons {
        let map = if r.sign >= 0 {
            &mut pos_map
        } else {
            &mut neg_map
        };
        for y in 0..height {
            for x in 0..width {
                let (px, py) = pixel_coord(x, y, width, height);
                let d2 = (px - r.pos.0).powi(2) + (py - r.pos.1).powi(2);
                map[y * width + x] += r.weight * (-d2 / (2.0 * r.var)).exp();
            }
        }
    }
    Ok(DistributionMap {
        width,
        height,
        pos_map,
        neg_map,
    })
}

/// Result of separating the positive and negative distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphCut {
    /// `true` where a pixel ends on the positive (sink) side.
    pub positive: Vec<bool>,
    pub cut_value: f64,
    /// Cut edges weighted by the local difference of the signed map.
    pub boundary: Vec<f64>,
}

/// Builds the 4-connected pixel graph used by [`graphcut_boundary`]:
/// pixel `p` is node `p`, the source is `n` and the sink `n + 1`.
pub fn build_cut_graph(maps: &DistributionMap) -> FlowGraph {
    let (w, h) = (maps.width, maps.height);
    let n = w * h;
    let d = maps.difference();
    let mut g = FlowGraph::new(n + 2);
    for p in 0..n {
        g.add_edge(n, p, maps.neg_map[p], 0.0);
        g.add_edge(p, n + 1, maps.pos_map[p], 0.0);
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                let c = (d[p] - d[p + 1]).powi(2);
                g.add_edge(p, p + 1, c, c);
            }
            if y + 1 < h {
                let c = (d[p] - d[p + w]).powi(2);
                g.add_edge(p, p + w, c, c);
            }
        }
    }
    g
}

/// Minimum cut between the negative (source) and positive (sink)
/// distributions. Pairwise capacities are squared differences of the signed
/// map between neighbours. Pixels touching the cut are scaled by their
/// largest neighbour difference of that map.
pub fn graphcut_boundary(maps: &DistributionMap) -> Result<GraphCut> {
    let (w, h) = (maps.width, maps.height);
    let n = w * h;
    if maps.pos_map.len() != n || maps.neg_map.len() != n {
        return Err(invalid("distribution maps do not match their dims"));
    }
    let mut g = build_cut_graph(maps);
    let cut_value = g.max_flow(n, n + 1);
    let source = g.source_side(n);
    let positive: Vec<bool> = (0..n).map(|p| !source[p]).collect();
    let d = maps.difference();
    let mut boundary = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut on_cut = false;
            let mut b: f64 = 0.0;
            let mut check = |q: usize| {
                on_cut |= positive[p] != positive[q];
                b = b.max((d[p] - d[q]).abs());
            };
            if x > 0 {
                check(p - 1);
            }
            if x + 1 < w {
                check(p + 1);
            }
            if y > 0 {
                check(p - w);
            }
            if y + 1 < h {
                check(p + w);
            }
            boundary[p] = if on_cut { b } else { 0.0 };
        }
    }
    Ok(GraphCut {
        positive,
        cut_value,
        boundary,
    })
}

/// Files written by [`visualize_feature`].
#[derive(Clone, Debug, PartialEq)]
pub struct VizOutput {
    pub blobs: PathBuf,
    pub boundary: PathBuf,
    pub recons: Vec<ReconGaussian>,
}

/// Renders the signed distribution map and the upscaled boundary of one
/// feature into `dir` as `layer{L}_feature{F}_{blobs|boundary}.pgm`.
pub fn visualize_feature(
    network: &Network,
    layer: usize,
    feature: usize,
    dir: &Path,
) -> Result<VizOutput> {
    let recons = mean_reconstruct(network, layer, feature)?;
    let (rw, rh) = receptive_field(network, layer)?;
    let (w, h) = (rw + 8, rh + 8);
    let maps = render_distribution_maps(&recons, w, h)?;
    let cut = graphcut_boundary(&maps)?;
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let blobs = dir.join(format!("layer{}_feature{}_blobs.pgm", layer, feature));
    let boundary = dir.join(format!("layer{}_feature{}_boundary.pgm", layer, feature));
    pgm::write_pgm(&blobs, &maps.difference(), w, h)?;
    let up = pgm::upscale_nearest(&cut.boundary, w, h, BOUNDARY_UPSCALE);
    pgm::write_pgm(&boundary, &up, w * BOUNDARY_UPSCALE, h * BOUNDARY_UPSCALE)?;
    Ok(VizOutput {
        blobs,
        boundary,
        recons,
    })
}
