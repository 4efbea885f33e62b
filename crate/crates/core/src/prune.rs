//! Post-training simplification of compositional banks: merging overlapping
//! components and discarding negligible ones.

use std::fmt::Write as _;

use crate::comp_layer::CompFilterBank;
use crate::error::{invalid, Result};
use crate::gaussian::GaussianComponent;
use crate::network::{Layer, Network};

pub const DEFAULT_MERGE_TAU: f64 = 0.5;
pub const DEFAULT_DISCARD_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    /// 1-based compositional layer index.
    pub layer: usize,
    pub components_before: usize,
    pub merged: usize,
    pub discarded: usize,
    pub components_after: usize,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str =
        "layer,components_before,merged,discarded,components_after,loss_before,loss_after";

    /// Fraction of components removed by merging or discarding.
    pub fn removed_fraction(&self) -> f64 {
        (self.merged + self.discarded) as f64 / self.components_before.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let loss = |v: Option<f64>| {
            v.map(|x| format!("{:.6}", x))
                .unwrap_or_else(|| "n/a".into())
        };
        let mut s = String::new();
        let _ = writeln!(s, "layer {}", self.layer);
        let _ = writeln!(s, "  components before: {}", self.components_before);
        let _ = writeln!(s, "  merged:            {}", self.merged);
        let _ = writeln!(s, "  discarded:         {}", self.discarded);
        let _ = writeln!(
            s,
            "  components after:  {} ({:.1}% removed)",
            self.components_after,
            100.0 * self.removed_fraction()
        );
        let _ = writeln!(s, "  loss before:       {}", loss(self.loss_before));
        let _ = writeln!(s, "  loss after:        {}", loss(self.loss_after));
        s
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.layer,
            self.components_before,
            self.merged,
            self.discarded,
            self.components_after,
            opt(self.loss_before),
            opt(self.loss_after)
        )
    }
}

fn merge_pair(a: &GaussianComponent, b: &GaussianComponent) -> Option<GaussianComponent> {
    let (wa, wb) = (a.weight.abs(), b.weight.abs());
    let total = wa + wb;
    if total == 0.0 {
        return None;
    }
    let mix = |x: f64, y: f64| (wa * x + wb * y) / total;
    Some(GaussianComponent {
        weight: a.weight + b.weight,
        mu_x: mix(a.mu_x, b.mu_x),
        mu_y: mix(a.mu_y, b.mu_y),
        sigma: mix(a.sigma, b.sigma),
    })
}

/// Greedily merges, closest pair first, components of one group whose means
/// lie closer than `tau * max(sigma_i, sigma_j)`. Returns the number of
/// components removed.
pub fn merge_group(group: &mut Vec<GaussianComponent>, tau: f64) -> usize {
    let before = group.len();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (&group[i], &group[j]);
                let d = ((a.mu_x - b.mu_x).powi(2) + (a.mu_y - b.mu_y).powi(2)).sqrt();
                if d < tau * a.sigma.max(b.sigma) && best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        match merge_pair(&group[i], &group[j]) {
            Some(m) => {
                group[i] = m;
                group.remove(j);
            }
            None if group.len() > 2 => {
                group.remove(j);
                group.remove(i);
            }
            // both weights are zero and nothing else is left: keep one
            None => {
                group.remove(j);
                break;
            }
        }
    }
    before - group.len()
}

pub fn merge_overlapping(bank: &CompFilterBank, tau: f64) -> Result<(CompFilterBank, usize)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid(format!("merge tau must be positive, got {}", tau)));
    }
    let mut out = bank.clone();
    let merged = out
        .groups_mut()
        .iter_mut()
        .map(|g| merge_group(g, tau))
        .sum();
    out.project_constraints();
    Ok((out, merged))
}

/// Removes components whose `|weight|` is below `fraction` of the largest
/// magnitude in the bank. A group is never emptied: if everything would
/// go, its largest component stays.
pub fn discard_small(bank: &CompFilterBank, fraction: f64) -> Result<(CompFilterBank, usize)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(format!(
            "discard fraction must be in [0, 1), got {}",
            fraction
        )));
    }
    let max = bank
        .components()
        .map(|c| c.weight.abs())
        .fold(0.0, f64::max);
    let threshold = fraction * max;
    let small = |c: &GaussianComponent| {
        let w = c.weight.abs();
        w < threshold || (fraction > 0.0 && w == 0.0)
    };
    let mut out = bank.clone();
    let mut discarded = 0;
    for group in out.groups_mut() {
        if group.iter().all(small) {
            let keep = group.iter().enumerate().fold(0, |best, (i, c)| {
                if c.weight.abs() > group[best].weight.abs() {
                    i
                } else {
                    best
                }
            });
            discarded += group.len() - 1;
            let kept = group[keep];
            group.clear();
            group.push(kept);
        } else {
            let before = group.len();
            group.retain(|c| !small(c));
            discarded += before - group.len();
        }
    }
    Ok((out, discarded))
}

/// Merge then discard on one bank.
pub fn prune_bank(
    bank: &CompFilterBank,
    tau: f64,
    fraction: f64,
) -> Result<(CompFilterBank, PruneReport)> {
    let before = bank.component_count();
    let (merged_bank, merged) = merge_overlapping(bank, tau)?;
    let (pruned, discarded) = discard_small(&merged_bank, fraction)?;
    let report = PruneReport {
        layer: 0,
        components_before: before,
        merged,
        discarded,
        components_after: pruned.component_count(),
        loss_before: None,
        loss_after: None,
    };
    debug_assert_eq!(report.components_after, before - merged - discarded);
    Ok((pruned, report))
}

/// Prunes the selected compositional layers (1-based; all when `layers` is
/// empty) of a network in place.
pub fn prune_network(
    network: &mut Network,
    layers: &[usize],
    tau: f64,
    fraction: f64,
) -> Result<Vec<PruneReport>> {
    let comp_indices = network.comp_layer_indices();
    for &l in layers {
        if l == 0 || l > comp_indices.len() {
            return Err(invalid(format!(
                "compositional layer {} requested, network has {}",
                l,
                comp_indices.len()
            )));
        }
    }
    let mut reports = Vec::new();
    for (ordinal, &idx) in comp_indices.iter().enumerate() {
        let layer = ordinal + 1;
        if !layers.is_empty() && !layers.contains(&layer) {
            continue;
        }
        if let Layer::CompConv(bank) = &mut network.layers_mut()[idx] {
            let (pruned, mut report) = prune_bank(bank, tau, fraction)?;
            report.layer = layer;
            *bank = pruned;
            reports.push(report);
        }
    }
    Ok(reports)
}
