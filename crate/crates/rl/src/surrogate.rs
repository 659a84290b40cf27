//! A training-free stand-in for [`crate::PruningEnv`]: terminal accuracy is
//! a fixed smooth function of the profile whose argmax is known.

use chanprune_core::profiles::{compression_of_counts, keep_count, BETA_MIN};
use chanprune_core::rewards::RewardConfig;
use chanprune_core::{Error, NetworkSpec, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{EpisodeState, Environment, StepOutcome, Terminal};
use crate::obs::{build_observation, c_max, scatter_features, Observation};

pub const DEFAULT_WIDTH: f64 = 0.25;

/// `A(beta) = A_e * exp(-mean((beta - p*)^2) / (2 w^2))`; compression is
/// counted exactly on the real spec.
#[derive(Clone)]
pub struct SurrogateEnv {
    id: String,
    spec: NetworkSpec,
    reward: RewardConfig,
    width: f64,
    target: Vec<f64>,
    features: Vec<Vec<f64>>,
    state: EpisodeState,
}

/// Pruned fraction of a profile under exact keep counts.
pub fn profile_c(spec: &NetworkSpec, betas: &[f64]) -> f64 {
    let counts: Vec<usize> = betas.iter().zip(spec.flag_lengths()).map(|(&b, &c)| keep_count(b, c)).collect();
    compression_of_counts(spec, &counts).c
}

/// Seeded per-layer shape `u`, scaled as `p* = clamp(1 - s u)` with `s`
/// bisected so the pruned fraction of `p*` lands on `c_target`.
pub fn seeded_target(spec: &NetworkSpec, c_target: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A26);
    let u: Vec<f64> = (0..spec.flag_count()).map(|_| rng.random_range(0.3..1.0)).collect();
    let at = |s: f64| -> Vec<f64> { u.iter().map(|&ui| (1.0 - s * ui).clamp(BETA_MIN, 1.0)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0 / 0.3);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if profile_c(spec, &at(mid)) < c_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (at(lo), at(hi));
    if (profile_c(spec, &a) - c_target).abs() <= (profile_c(spec, &b) - c_target).abs() {
        a
    } else {
        b
    }
}

impl SurrogateEnv {
    /// Target profile drawn from `seed` and matched to the reward's `C_e`.
    pub fn new(spec: NetworkSpec, reward: RewardConfig, seed: u64) -> Result<Self> {
        let target = seeded_target(&spec, reward.c_e, seed);
        Self::with_target(spec, reward, target, DEFAULT_WIDTH, seed)
    }

    pub fn with_target(spec: NetworkSpec, reward: RewardConfig, target: Vec<f64>, width: f64, seed: u64) -> Result<Self> {
        reward.validate()?;
        if target.len() != spec.flag_count() {
            return Err(Error::Config(format!("target has {} entries for {} flags", target.len(), spec.flag_count())));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Config("surrogate width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEA7_0000);
        let features = spec
            .flag_lengths()
            .iter()
            .map(|&c| (0..c).map(|_| rng.random_range(0.05..1.0)).collect())
            .collect();
        let state = EpisodeState::idle(&spec);
        Ok(Self {
            id: format!("surrogate-{}-{seed}", spec.arch_name()),
            spec,
            reward,
            width,
            target,
            features,
            state,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// The profile at which the synthetic accuracy peaks.
    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    /// Synthetic accuracy of a profile.
    pub fn accuracy(&self, betas: &[f64]) -> f64 {
        let n = betas.len().max(1) as f64;
        let d2 = betas.iter().zip(&self.target).map(|(b, p)| (b - p).powi(2)).sum::<f64>() / n;
        self.reward.a_e * (-d2 / (2.0 * self.width * self.width)).exp()
    }

    /// Terminal reward a profile would earn (masks do not matter here).
    pub fn profile_reward(&self, betas: &[f64]) -> f64 {
        let layer_pruned: Vec<f64> = betas
            .iter()
            .zip(self.spec.flag_lengths())
            .map(|(&b, &c)| 1.0 - keep_count(b, c) as f64 / c as f64)
            .collect();
        self.reward.terminal(self.accuracy(betas), profile_c(&self.spec, betas), &layer_pruned)
    }

    fn features(&self, flag: usize) -> Vec<f64> {
        let mask = self.state.masks.mask(flag);
        let kept: Vec<f64> = self.features[flag].iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
        scatter_features(&kept, mask, c_max(&self.spec))
    }
}

impl Environment for SurrogateEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn arch(&self) -> String {
        self.spec.arch_name()
    }

    fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.state.start(&self.spec, seed);
        Ok(build_observation(&self.spec, self.features(0), Some(0), 0, 0.0))
    }

    fn step(&mut self, action: f64) -> Result<StepOutcome> {
        let (flag, beta) = self.state.apply(&self.spec, action)?;
        let counts = self.state.masks.retained_counts();
        let comp = compression_of_counts(&self.spec, &counts);
        let l = self.spec.flag_count();
        let t = self.state.t;
        let next = (t < l).then_some(t);
        let obs = build_observation(&self.spec, self.features(flag), next, t, comp.c);
        if t < l {
            return Ok(StepOutcome {
                obs,
                reward: 0.0,
                done: false,
                beta,
                terminal: None,
            });
        }
        let accuracy = self.accuracy(&self.state.betas);
        let reward = self.reward.terminal(accuracy, comp.c, &self.state.layer_pruned());
        Ok(StepOutcome {
            obs,
            reward,
            done: true,
            beta,
            terminal: Some(Terminal {
                accuracy,
                c: comp.c,
                cf: comp.cf,
                reward,
            }),
        })
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
