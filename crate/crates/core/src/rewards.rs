//! Terminal rewards for the pruning search and reward-landscape export.
//!
//! `C` is the pruned-parameter fraction in `[0, 1)`, not the compression
//! factor.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Gaussian,
    N2n,
    Hyperbolic,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Gaussian => "gaussian",
            RewardKind::N2n => "n2n",
            RewardKind::Hyperbolic => "hyperbolic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Expected accuracy; for the hyperbolic reward, the accuracy
    /// normalizer (typically the base network's accuracy).
    pub a_e: f64,
    pub c_e: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Hyperbolic only: normalized-accuracy level below which the
    /// accuracy term is strongly discouraged.
    #[serde(default = "default_acc_threshold")]
    pub accuracy_threshold: f64,
}

fn default_sigma() -> f64 {
    0.3
}
fn default_tau() -> f64 {
    0.1
}
fn default_acc_threshold() -> f64 {
    0.9
}

impl RewardConfig {
    pub fn gaussian(a_e: f64, c_e: f64, sigma: f64) -> Self {
        Self {
            kind: RewardKind::Gaussian,
            a_e,
            c_e,
            sigma,
            tau: default_tau(),
            accuracy_threshold: default_acc_threshold(),
        }
    }

    pub fn n2n(a_e: f64) -> Self {
        Self {
            kind: RewardKind::N2n,
            ..Self::gaussian(a_e, 0.0, default_sigma())
        }
    }

    pub fn hyperbolic(a_e: f64, c_e: f64, tau: f64) -> Self {
        Self {
            kind: RewardKind::Hyperbolic,
            tau,
            ..Self::gaussian(a_e, c_e, default_sigma())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_e > 0.0 && self.a_e <= 1.0) {
            return Err(Error::Config(format!("A_e = {} outside (0, 1]", self.a_e)));
        }
        if !(0.0..1.0).contains(&self.c_e) {
            return Err(Error::Config(format!("C_e = {} outside [0, 1)", self.c_e)));
        }
        match self.kind {
            RewardKind::Gaussian if self.sigma <= 0.0 => Err(Error::Config("sigma must be positive".into())),
            RewardKind::Hyperbolic if self.tau <= 0.0 => Err(Error::Config("tau must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Reward paid at the last step. `layer_pruned` holds each layer's
    /// pruned channel fraction `1 - sum(alpha_t) / c_t` (hyperbolic only).
    pub fn terminal(&self, accuracy: f64, c: f64, layer_pruned: &[f64]) -> f64 {
        match self.kind {
            RewardKind::Gaussian => gaussian_reward(accuracy, c, self),
            RewardKind::N2n => n2n_reward(accuracy, c, self),
            RewardKind::Hyperbolic => hyperbolic_terminal(accuracy, layer_pruned, self),
        }
    }
}

/// `(A / A_e) * exp(-(C - C_e)^2 / (2 sigma^2))`.
pub fn gaussian_reward(a: f64, c: f64, cfg: &RewardConfig) -> f64 {
    a / cfg.a_e * (-(c - cfg.c_e).powi(2) / (2.0 * cfg.sigma * cfg.sigma)).exp()
}

/// `(A / A_e) * (1 - C)^2`.
pub fn n2n_reward(a: f64, c: f64, cfg: &RewardConfig) -> f64 {
    a / cfg.a_e * (1.0 - c).powi(2)
}

/// Normalized tanh step used by both hyperbolic terms:
/// `[tanh((x - t)/tau) + tanh(t/tau)] / [tanh((1 - t)/tau) + tanh(t/tau)]`.
/// The tanh argument groups as `(x - t) / tau`; it is 0 at `x = 0` and 1
/// at `x = 1`.
pub fn hyperbolic_term(x: f64, threshold: f64, tau: f64) -> f64 {
    let off = (threshold / tau).tanh();
    (((x - threshold) / tau).tanh() + off) / (((1.0 - threshold) / tau).tanh() + off)
}

/// Per-layer compression term `r_c^t` for pruned fraction `x`.
pub fn hyperbolic_compression(x: f64, cfg: &RewardConfig) -> f64 {
    hyperbolic_term(x, cfg.c_e, cfg.tau)
}

/// Accuracy term `r_a` for accuracy `a` normalized by `A_e`.
pub fn hyperbolic_accuracy(a: f64, cfg: &RewardConfig) -> f64 {
    hyperbolic_term(a / cfg.a_e, cfg.accuracy_threshold, cfg.tau)
}

/// `r_a^l * sum_t r_c^t`.
pub fn hyperbolic_terminal(a: f64, layer_pruned: &[f64], cfg: &RewardConfig) -> f64 {
    hyperbolic_accuracy(a, cfg) * layer_pruned.iter().map(|&x| hyperbolic_compression(x, cfg)).sum::<f64>()
}

/// Full per-step reward sequence: zeros then the terminal reward.
pub fn hyperbolic_reward(a: f64, layer_pruned: &[f64], cfg: &RewardConfig) -> Vec<f64> {
    let mut r = vec![0.0; layer_pruned.len()];
    if let Some(last) = r.last_mut() {
        *last = hyperbolic_terminal(a, layer_pruned, cfg);
    }
    r
}

pub const A_MAX: f64 = 1.1;

/// Grid axes: `A_i = 1.1 i / (n - 1)` and `C_j = j / n`.
pub fn landscape_axes(resolution: usize) -> (Vec<f64>, Vec<f64>) {
    let n = resolution;
    let a = (0..n).map(|i| A_MAX * i as f64 / (n - 1) as f64).collect();
    let c = (0..n).map(|j| j as f64 / n as f64).collect();
    (a, c)
}

/// Row-major `(A, C, reward)` grid. The hyperbolic landscape treats the
/// network as a single layer pruned by `C`.
pub fn landscape(cfg: &RewardConfig, resolution: usize) -> Result<Vec<(f64, f64, f64)>> {
    cfg.validate()?;
    if resolution < 2 {
        return Err(Error::Config(format!("landscape resolution {resolution} < 2")));
    }
    let (a_axis, c_axis) = landscape_axes(resolution);
    let mut out = Vec::with_capacity(resolution * resolution);
    for &a in &a_axis {
        for &c in &c_axis {
            out.push((a, c, cfg.terminal(a, c, &[c])));
        }
    }
    Ok(out)
}

pub fn landscape_file_name(cfg: &RewardConfig) -> String {
    format!("{}_Ae{}_Ce{}.csv", cfg.kind.name(), cfg.a_e, cfg.c_e)
}

pub fn write_landscape(cfg: &RewardConfig, resolution: usize, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["A", "C", "reward"])?;
    for (a, c, r) in landscape(cfg, resolution)? {
        out.write_record([a.to_string(), c.to_string(), r.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the landscape into `dir` and returns the file path.
pub fn emit_landscape(cfg: &RewardConfig, resolution: usize, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(landscape_file_name(cfg));
    write_landscape(cfg, resolution, std::fs::File::create(&path)?)?;
    Ok(path)
}
