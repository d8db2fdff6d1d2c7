//! Compute accounting and exit placement.

use crate::error::{Error, Result};
use crate::tensor::LayerSpec;

/// Default exit positions as fractions of the full backbone cost.
pub const DEFAULT_EXIT_FRACTIONS: [f64; 6] = [0.15, 0.30, 0.45, 0.60, 0.75, 0.90];

/// Distances closer than this count as ties; ties go to the later layer.
const TIE_EPS: f64 = 1e-9;

pub fn count_macs(layer: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    layer.macs(input_shape)
}

/// Per-layer walk of a backbone: output shape and MACs of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub output_shapes: Vec<Vec<usize>>,
    pub macs: Vec<u64>,
}

impl LayerProfile {
    pub fn total(&self) -> u64 {
        self.macs.iter().sum()
    }

    /// Cumulative MACs through each layer (inclusive).
    pub fn cumulative(&self) -> Vec<u64> {
        self.macs
            .iter()
            .scan(0u64, |acc, m| {
                *acc += m;
                Some(*acc)
            })
            .collect()
    }
}

pub fn profile(backbone: &[LayerSpec], input_shape: &[usize]) -> Result<LayerProfile> {
    let mut shape = input_shape.to_vec();
    let mut output_shapes = Vec::with_capacity(backbone.len());
    let mut macs = Vec::with_capacity(backbone.len());
    for (i, layer) in backbone.iter().enumerate() {
        let m = layer.macs(&shape).map_err(|e| match e {
            Error::Shape {
                context,
                expected,
                actual,
            } => Error::Shape {
                context: format!("layer {i} ({context})"),
                expected,
                actual,
            },
            other => other,
        })?;
        shape = layer.output_shape(&shape)?;
        macs.push(m);
        output_shapes.push(shape.clone());
    }
    Ok(LayerProfile {
        output_shapes,
        macs,
    })
}

/// Index where the final classification stage begins: the trailing
/// `[pool] flatten ... linear` run.
pub fn final_stage_start(backbone: &[LayerSpec]) -> Result<usize> {
    let flatten = backbone
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Flatten))
        .ok_or_else(|| Error::InvalidModel("backbone has no flatten layer".into()))?;
    if !matches!(backbone.last(), Some(LayerSpec::Linear { .. })) {
        return Err(Error::InvalidModel(
            "backbone must end with a linear classifier".into(),
        ));
    }
    Ok(match flatten.checked_sub(1).map(|i| &backbone[i]) {
        Some(LayerSpec::AvgPool2d { .. } | LayerSpec::MaxPool2d { .. }) => flatten - 1,
        _ => flatten,
    })
}

/// Layers an internal exit may attach to: feature-map outputs before the
/// final classification stage.
pub fn eligible_attach_points(backbone: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<bool>> {
    let prof = profile(backbone, input_shape)?;
    let stop = final_stage_start(backbone)?;
    Ok(prof
        .output_shapes
        .iter()
        .enumerate()
        .map(|(i, s)| i < stop && s.len() == 3)
        .collect())
}

/// Place exits on arbitrary per-layer costs. For each target fraction the
/// eligible layer whose cumulative cost fraction is closest wins (ties go to
/// the later layer). Targets that land on an already chosen layer are
/// dropped with a warning.
pub fn place_exits_by_cost(layer_macs: &[u64], eligible: &[bool], targets: &[f64]) -> Result<Vec<usize>> {
    if layer_macs.len() != eligible.len() {
        return Err(Error::shape("place_exits", layer_macs.len(), eligible.len()));
    }
    for w in targets.windows(2) {
        if w[0] > w[1] {
            return Err(Error::invalid("exit fractions must be sorted"));
        }
    }
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::invalid(format!("exit fraction {t} outside (0, 1)")));
    }
    let total: u64 = layer_macs.iter().sum();
    if total == 0 {
        return Err(Error::InvalidModel("backbone has zero compute".into()));
    }
    if !eligible.iter().any(|e| *e) {
        return Err(Error::InvalidModel(
            "backbone too shallow: no layer can host an internal exit".into(),
        ));
    }
    let mut acc = 0u64;
    let fractions: Vec<f64> = layer_macs
        .iter()
        .map(|m| {
            acc += m;
            acc as f64 / total as f64
        })
        .collect();

    let mut chosen: Vec<usize> = Vec::new();
    for &t in targets {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in fractions.iter().enumerate() {
            if !eligible[i] {
                continue;
            }
            let d = (f - t).abs();
            best = match best {
                Some((_, bd)) if d > bd + TIE_EPS => best,
                Some((_, bd)) => Some((i, bd.min(d))),
                None => Some((i, d)),
            };
        }
        let (idx, _) = best.expect("at least one eligible layer");
        if chosen.contains(&idx) {
            log::warn!("exit fraction {t} maps to layer {idx}, which already hosts an exit; dropped");
        } else {
            chosen.push(idx);
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Attach indices for `targets` on a backbone.
pub fn place_exits(backbone: &[LayerSpec], input_shape: &[usize], targets: &[f64]) -> Result<Vec<usize>> {
    let prof = profile(backbone, input_shape)?;
    let eligible = eligible_attach_points(backbone, input_shape)?;
    place_exits_by_cost(&prof.macs, &eligible, targets)
}
