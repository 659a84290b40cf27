//! Layer-wise pruning profiles, their materialization into channel masks
//! and compression accounting.
//!
//! `beta` is always a retention fraction: 0.3 keeps 30% of a layer's
//! channels.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::netzoo::{CountPolicy, Dim, FlagId, NetworkSpec};
use crate::{Error, Result};

pub const BETA_MIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Provenance {
    Equal { k: f64 },
    Ramp { slope: f64, direction: Direction },
    Random { lo: f64, hi: f64 },
    RlPolicy { checkpoint: String },
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub arch: String,
    pub betas: Vec<f64>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Profile {
    pub fn new(arch: impl Into<String>, betas: Vec<f64>, provenance: Provenance, seed: u64) -> Result<Self> {
        let p = Self {
            arch: arch.into(),
            betas,
            provenance,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() {
            return Err(Error::Config("empty profile".into()));
        }
        for (i, &b) in self.betas.iter().enumerate() {
            if !(BETA_MIN..=1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "beta[{i}] = {b} outside [{BETA_MIN}, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if self.betas.len() != spec.flag_count() {
            return Err(Error::Config(format!(
                "profile has {} entries, {} has {} flags",
                self.betas.len(),
                spec.arch_name(),
                spec.flag_count()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Channels this profile keeps per flag for the given lengths.
    pub fn keep_counts(&self, lengths: &[usize]) -> Vec<usize> {
        self.betas
            .iter()
            .zip(lengths)
            .map(|(&b, &c)| keep_count(b, c))
            .collect()
    }
}

/// `max(1, round(beta * c))`.
pub fn keep_count(beta: f64, c: usize) -> usize {
    ((beta * c as f64).round() as usize).clamp(1, c)
}

fn check_k(k: f64) -> Result<()> {
    if !(BETA_MIN..=1.0).contains(&k) {
        return Err(Error::Config(format!("k = {k} outside [{BETA_MIN}, 1]")));
    }
    Ok(())
}

pub fn equally_distributed(arch: &str, flag_count: usize, k: f64) -> Result<Profile> {
    check_k(k)?;
    Profile::new(arch, vec![k; flag_count], Provenance::Equal { k }, 0)
}

/// `beta_i = clamp(s * i / l, BETA_MIN, 1)` for `i = 1..=l`, optionally
/// reversed.
pub fn ramp(arch: &str, flag_count: usize, slope: f64, direction: Direction) -> Result<Profile> {
    if !(slope > 0.0 && slope <= 1.0) {
        return Err(Error::Config(format!("slope {slope} outside (0, 1]")));
    }
    let l = flag_count as f64;
    let mut betas: Vec<f64> = (1..=flag_count)
        .map(|i| (slope * i as f64 / l).clamp(BETA_MIN, 1.0))
        .collect();
    if direction == Direction::Decreasing {
        betas.reverse();
    }
    Profile::new(arch, betas, Provenance::Ramp { slope, direction }, 0)
}

pub fn random_profile(arch: &str, flag_count: usize, lo: f64, hi: f64, rng: &mut impl Rng, seed: u64) -> Result<Profile> {
    if !(BETA_MIN <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("random range [{lo}, {hi}] invalid")));
    }
    let betas = (0..flag_count).map(|_| rng.random_range(lo..=hi)).collect();
    Profile::new(arch, betas, Provenance::Random { lo, hi }, seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterializeMode {
    #[default]
    ExactCount,
    Bernoulli,
}

/// One Boolean retain vector per flag. Tensor dimensions inherited from a
/// flag have no storage of their own; [`MaskSet::dim_view`] exposes them
/// read-only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Result<Self> {
        for (f, m) in masks.iter().enumerate() {
            if !m.iter().any(|&b| b) {
                return Err(Error::Config(format!("flag {f} retains no channels")));
            }
        }
        Ok(Self { masks })
    }

    pub fn all_ones(lengths: &[usize]) -> Self {
        Self {
            masks: lengths.iter().map(|&c| vec![true; c]).collect(),
        }
    }

    pub fn from_indices(lengths: &[usize], keep: &[Vec<usize>]) -> Result<Self> {
        let masks = lengths
            .iter()
            .zip(keep)
            .map(|(&c, idx)| {
                let mut m = vec![false; c];
                for &i in idx {
                    m[i] = true;
                }
                m
            })
            .collect();
        Self::new(masks)
    }

    pub fn flag_count(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, flag: FlagId) -> &[bool] {
        &self.masks[flag]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    /// Replace one flag's vector; every dimension locked to it follows.
    pub fn set_mask(&mut self, flag: FlagId, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.masks[flag].len() {
            return Err(Error::MaskLength {
                flag,
                expected: self.masks[flag].len(),
                actual: mask.len(),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Config(format!("flag {flag} retains no channels")));
        }
        self.masks[flag] = mask;
        Ok(())
    }

    pub fn retained(&self, flag: FlagId) -> Vec<usize> {
        self.masks[flag]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.masks.iter().map(Vec::len).collect()
    }

    pub fn check_lengths(&self, lengths: &[usize]) -> Result<()> {
        if self.masks.len() != lengths.len() {
            return Err(Error::Config(format!(
                "{} masks for {} flags",
                self.masks.len(),
                lengths.len()
            )));
        }
        for (flag, (m, &c)) in self.masks.iter().zip(lengths).enumerate() {
            if m.len() != c {
                return Err(Error::MaskLength {
                    flag,
                    expected: c,
                    actual: m.len(),
                });
            }
        }
        Ok(())
    }

    /// Read-only mask along one dimension of a parameter tensor.
    pub fn dim_view<'a>(&'a self, spec: &NetworkSpec, param: usize, dim: usize) -> DimMask<'a> {
        match spec.params()[param].dims[dim] {
            Dim::Fixed { size } => DimMask::Full(size),
            Dim::Flag { flag } => DimMask::Flag(&self.masks[flag], 1),
            Dim::Tiled { flag, times } => DimMask::Flag(&self.masks[flag], times),
        }
    }
}

/// Borrowed view of the retain pattern along one tensor dimension.
#[derive(Clone, Copy, Debug)]
pub enum DimMask<'a> {
    Full(usize),
    /// A flag's vector tiled `n` times (position major, channel minor).
    Flag(&'a [bool], usize),
}

impl DimMask<'_> {
    pub fn len(&self) -> usize {
        match *self {
            DimMask::Full(n) => n,
            DimMask::Flag(m, t) => m.len() * t,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> bool {
        match *self {
            DimMask::Full(_) => true,
            DimMask::Flag(m, _) => m[i % m.len()],
        }
    }

    pub fn retained(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.get(i)).collect()
    }
}

pub fn materialize(profile: &Profile, lengths: &[usize], rng: &mut impl Rng, mode: MaterializeMode) -> Result<MaskSet> {
    if profile.betas.len() != lengths.len() {
        return Err(Error::Config(format!(
            "profile has {} entries for {} flags",
            profile.betas.len(),
            lengths.len()
        )));
    }
    let masks = profile
        .betas
        .iter()
        .zip(lengths)
        .map(|(&beta, &c)| match mode {
            MaterializeMode::ExactCount => {
                let mut m = vec![false; c];
                for i in sample(rng, c, keep_count(beta, c)) {
                    m[i] = true;
                }
                m
            }
            MaterializeMode::Bernoulli => {
                let mut m: Vec<bool> = (0..c).map(|_| rng.random_bool(beta)).collect();
                if !m.iter().any(|&b| b) {
                    m[rng.random_range(0..c)] = true;
                }
                m
            }
        })
        .collect();
    MaskSet::new(masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Compression {
    pub cf: f64,
    /// Pruned-parameter fraction `1 - |w_p| / |w|`.
    pub c: f64,
    pub base_params: u64,
    pub pruned_params: u64,
}

impl Compression {
    fn from_counts(base: u64, pruned: u64) -> Self {
        Self {
            cf: base as f64 / pruned as f64,
            c: 1.0 - pruned as f64 / base as f64,
            base_params: base,
            pruned_params: pruned,
        }
    }
}

/// Compression of a profile, using its deterministic keep counts.
pub fn compression_of_profile(profile: &Profile, spec: &NetworkSpec) -> Result<Compression> {
    profile.check_spec(spec)?;
    let counts = profile.keep_counts(spec.flag_lengths());
    Ok(compression_of_counts(spec, &counts))
}

pub fn compression_of_masks(masks: &MaskSet, spec: &NetworkSpec) -> Result<Compression> {
    let base = spec.param_count(None)?;
    let pruned = spec.param_count(Some(masks))?;
    Ok(Compression::from_counts(base, pruned))
}

pub fn compression_of_counts(spec: &NetworkSpec, counts: &[usize]) -> Compression {
    let base = spec.count_for_lengths(spec.flag_lengths(), CountPolicy::Weights);
    let pruned = spec.count_for_lengths(counts, CountPolicy::Weights);
    Compression::from_counts(base, pruned)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Equal,
    Ramp { direction: Direction },
}

impl Family {
    pub fn profile(self, spec: &NetworkSpec, param: f64) -> Result<Profile> {
        let arch = spec.arch_name();
        match self {
            Family::Equal => equally_distributed(&arch, spec.flag_count(), param),
            Family::Ramp { direction } => ramp(&arch, spec.flag_count(), param, direction),
        }
    }
}

pub const CF_REL_TOL: f64 = 0.02;

/// Finds the family parameter (k or slope) whose profile hits `target` CF
/// within 2%. CF is a non-increasing step function of the parameter, so
/// bisection brackets the crossing; the final answer is the best nearby
/// parameter at which a step occurs.
pub fn solve_k_for_cf(spec: &NetworkSpec, family: Family, target: f64) -> Result<f64> {
    let cf = |p: f64| -> Result<f64> { Ok(compression_of_profile(&family.profile(spec, p)?, spec)?.cf) };
    let (lo, hi) = (BETA_MIN, 1.0);
    let (cf_max, cf_min) = (cf(lo)?, cf(hi)?);
    let within = |v: f64| (v - target).abs() / target <= CF_REL_TOL;
    if target < 1.0 || target > cf_max * (1.0 + CF_REL_TOL) {
        return Err(Error::Infeasible {
            target,
            min: cf_min,
            max: cf_max,
        });
    }
    if within(cf_min) {
        return Ok(hi);
    }
    // Invariant: cf(a) >= target > cf(b).
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if cf(m)? >= target {
            a = m;
        } else {
            b = m;
        }
    }
    let (ca, cb) = (cf(a)?, cf(b)?);
    let (best, cf_best) = if (ca - target).abs() <= (cb - target).abs() { (a, ca) } else { (b, cb) };
    if within(cf_best) {
        return Ok(best);
    }
    Err(Error::Infeasible {
        target,
        min: cf_min,
        max: cf_max,
    })
}
