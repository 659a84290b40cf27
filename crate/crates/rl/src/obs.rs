//! Per-step observations: a padded block of per-channel Taylor features
//! followed by a fixed set of layer descriptors.

use chanprune_core::netzoo::LayerKind;
use chanprune_core::{FlagId, NetworkSpec};
use serde::{Deserialize, Serialize};

pub const DESCRIPTOR_WIDTH: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `c_max` entries; channels outside the flag or pruned are exactly 0.
    pub features: Vec<f64>,
    /// Layer position `t/l`, `c_t/c_max`, kernel area / 9, stride, the
    /// layer's parameter share, pruned fraction so far, steps left / l.
    pub descriptors: [f64; DESCRIPTOR_WIDTH],
}

impl Observation {
    pub fn width(&self) -> usize {
        self.features.len() + DESCRIPTOR_WIDTH
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.features.iter().chain(&self.descriptors).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Widest flag of the unpruned architecture.
pub fn c_max(spec: &NetworkSpec) -> usize {
    spec.base_lengths().into_iter().max().unwrap_or(0)
}

pub fn obs_width(spec: &NetworkSpec) -> usize {
    c_max(spec) + DESCRIPTOR_WIDTH
}

/// Static description of flag `flag` (in the unpruned spec).
pub struct LayerDescriptor {
    pub index: f64,
    pub channels: f64,
    pub kernel_area: f64,
    pub stride: f64,
    pub param_share: f64,
}

pub fn describe_flag(spec: &NetworkSpec, flag: FlagId) -> LayerDescriptor {
    let base = spec.base_lengths();
    let c_max = base.iter().copied().max().unwrap_or(1) as f64;
    let l = base.len() as f64;
    let owner = spec.flags()[flag].owner;
    let (kernel_area, stride) = match spec.layers()[owner].kind {
        LayerKind::Conv { weight, stride, .. } => {
            let s = spec.param_shape(weight);
            ((s[0] * s[1]) as f64 / 9.0, stride as f64)
        }
        _ => (0.0, 1.0),
    };
    LayerDescriptor {
        index: flag as f64 / l,
        channels: base[flag] as f64 / c_max,
        kernel_area,
        stride,
        param_share: spec.flag_param_share(flag),
    }
}

/// Normalizes `scores` (one per retained channel, in index order) by their
/// maximum, scatters them back over `mask` and pads to `c_max`.
pub fn scatter_features(scores: &[f64], mask: &[bool], c_max: usize) -> Vec<f64> {
    let peak = scores.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let mut out = vec![0.0; c_max];
    let mut k = 0;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            let s = scores.get(k).copied().unwrap_or(0.0);
            out[i] = if peak > 0.0 { s / peak } else { 0.0 };
            k += 1;
        }
    }
    out
}

/// Assembles an observation.
///
/// `features` belong to the flag most recently acted on (or the first flag
/// at reset); descriptors describe `next`, the flag the next action sets,
/// or carry zeros for the layer fields once the episode is over.
pub fn build_observation(
    spec: &NetworkSpec,
    features: Vec<f64>,
    next: Option<FlagId>,
    steps_done: usize,
    pruned_fraction: f64,
) -> Observation {
    let l = spec.flag_count().max(1) as f64;
    let mut d = [0.0; DESCRIPTOR_WIDTH];
    if let Some(f) = next {
        let desc = describe_flag(spec, f);
        d[0] = desc.index;
        d[1] = desc.channels;
        d[2] = desc.kernel_area;
        d[3] = desc.stride;
        d[4] = desc.param_share;
    } else {
        d[0] = 1.0;
    }
    d[5] = pruned_fraction;
    d[6] = (l - steps_done as f64) / l;
    Observation { features, descriptors: d }
}
