//! The pruning MDP and the circular environment queue.

use std::sync::Arc;

use chanprune_core::data::{Dataset, Split};
use chanprune_core::metrics::{select_channels, taylor_scores, Strategy};
use chanprune_core::profiles::{compression_of_masks, keep_count, BETA_MIN};
use chanprune_core::pruning::{rebuild, InitStrategy};
use chanprune_core::rewards::RewardConfig;
use chanprune_core::train::{evaluate, fine_tune, TrainConfig};
use chanprune_core::{Error, MaskSet, NetworkSpec, Result, TrainedNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::obs::{build_observation, c_max, obs_width, scatter_features, Observation};

/// Affine clamp of a raw policy sample into `[BETA_MIN, 1]`.
pub fn squash_action(action: f64) -> f64 {
    if action.is_nan() {
        return BETA_MIN;
    }
    action.clamp(0.0, 1.0).max(BETA_MIN)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub accuracy: f64,
    /// Pruned parameter fraction.
    pub c: f64,
    pub cf: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// The retention fraction actually applied.
    pub beta: f64,
    pub terminal: Option<Terminal>,
}

pub trait Environment: Send + Sync {
    fn id(&self) -> &str;
    /// Architecture name of the network being pruned.
    fn arch(&self) -> String;
    fn spec(&self) -> &NetworkSpec;
    fn flag_count(&self) -> usize {
        self.spec().flag_count()
    }
    fn obs_width(&self) -> usize {
        obs_width(self.spec())
    }
    /// Starts an episode with every retention fraction at 1.
    fn reset(&mut self, seed: u64) -> Result<Observation>;
    fn step(&mut self, action: f64) -> Result<StepOutcome>;
    fn boxed_clone(&self) -> Box<dyn Environment>;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Bookkeeping shared by the real and surrogate environments.
#[derive(Clone, Debug)]
pub(crate) struct EpisodeState {
    pub masks: MaskSet,
    pub betas: Vec<f64>,
    pub t: usize,
    pub rng: ChaCha8Rng,
    pub active: bool,
}

impl EpisodeState {
    pub fn idle(spec: &NetworkSpec) -> Self {
        Self {
            masks: MaskSet::all_ones(spec.flag_lengths()),
            betas: vec![1.0; spec.flag_count()],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            active: false,
        }
    }

    pub fn start(&mut self, spec: &NetworkSpec, seed: u64) {
        *self = Self::idle(spec);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.active = true;
    }

    /// Records `beta` for the current layer and draws its exact-count
    /// random mask. Returns the flag that was set.
    pub fn apply(&mut self, spec: &NetworkSpec, action: f64) -> Result<(usize, f64)> {
        if !self.active {
            return Err(Error::Usage("step called outside an active episode; call reset first".into()));
        }
        let f = self.t;
        let beta = squash_action(action);
        let c = spec.flag_lengths()[f];
        let mask = select_channels(None, c, keep_count(beta, c), Strategy::Random, &mut self.rng)?;
        self.masks.set_mask(f, mask)?;
        self.betas[f] = beta;
        self.t += 1;
        if self.t == spec.flag_count() {
            self.active = false;
        }
        Ok((f, beta))
    }

    pub fn layer_pruned(&self) -> Vec<f64> {
        self.masks
            .masks()
            .iter()
            .map(|m| 1.0 - m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// Taylor features recomputed on the partially pruned network.
    #[default]
    PartialNet,
    /// Taylor features of the unpruned network, masked.
    BaseNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningEnvConfig {
    pub reward: RewardConfig,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub obs_mode: ObsMode,
    /// Validation samples used for observation features.
    #[serde(default = "default_obs_samples")]
    pub obs_samples: usize,
}

fn default_obs_samples() -> usize {
    128
}

impl PruningEnvConfig {
    pub fn new(reward: RewardConfig, finetune: TrainConfig) -> Self {
        Self {
            reward,
            finetune,
            obs_mode: ObsMode::default(),
            obs_samples: default_obs_samples(),
        }
    }
}

/// Prunes one trained network on one dataset, one flag per step, and pays
/// the configured reward after a short fine-tune at the end.
#[derive(Clone)]
pub struct PruningEnv {
    id: String,
    base: Arc<TrainedNet<f32>>,
    split: Arc<Split>,
    obs_data: Arc<Dataset>,
    base_scores: Arc<Vec<Vec<f64>>>,
    cfg: PruningEnvConfig,
    state: EpisodeState,
}

impl PruningEnv {
    pub fn new(id: impl Into<String>, base: Arc<TrainedNet<f32>>, split: Arc<Split>, cfg: PruningEnvConfig) -> Result<Self> {
        cfg.reward.validate()?;
        cfg.finetune.validate()?;
        if split.train.is_empty() || split.val.is_empty() {
            return Err(Error::Dataset("environment needs nonempty train and val sets".into()));
        }
        let n = cfg.obs_samples.clamp(1, split.val.len());
        let obs_data = Arc::new(split.val.subset(&(0..n).collect::<Vec<_>>()));
        let base_scores = match cfg.obs_mode {
            ObsMode::BaseNet => taylor_scores(base.as_ref(), &obs_data, 256)?.scores,
            ObsMode::PartialNet => Vec::new(),
        };
        let state = EpisodeState::idle(base.spec());
        Ok(Self {
            id: id.into(),
            base,
            split,
            obs_data,
            base_scores: Arc::new(base_scores),
            cfg,
            state,
        })
    }

    pub fn config(&self) -> &PruningEnvConfig {
        &self.cfg
    }

    pub fn base(&self) -> &TrainedNet<f32> {
        &self.base
    }

    pub fn betas(&self) -> &[f64] {
        &self.state.betas
    }

    pub fn masks(&self) -> &MaskSet {
        &self.state.masks
    }

    fn features(&self, net: Option<&TrainedNet<f32>>, flag: usize) -> Result<Vec<f64>> {
        let mask = self.state.masks.mask(flag);
        let c_max = c_max(self.base.spec());
        let retained: Vec<f64> = match (self.cfg.obs_mode, net) {
            (ObsMode::PartialNet, Some(net)) => taylor_scores(net, &self.obs_data, 256)?.scores[flag].clone(),
            (ObsMode::PartialNet, None) => {
                // Pretrained rebuilds draw nothing from the generator.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let net = rebuild(&self.base, &self.state.masks, InitStrategy::Pretrained, &mut rng)?;
                taylor_scores(&net, &self.obs_data, 256)?.scores[flag].clone()
            }
            (ObsMode::BaseNet, _) => self.base_scores[flag]
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&s, _)| s)
                .collect(),
        };
        Ok(scatter_features(&retained, mask, c_max))
    }
}

impl Environment for PruningEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn arch(&self) -> String {
        self.base.spec().arch_name()
    }

    fn spec(&self) -> &NetworkSpec {
        self.base.spec()
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.state.start(self.base.spec(), seed);
        let features = match self.cfg.obs_mode {
            ObsMode::PartialNet => taylor_scores(self.base.as_ref(), &self.obs_data, 256)?.scores[0].clone(),
            ObsMode::BaseNet => self.base_scores[0].clone(),
        };
        let features = scatter_features(&features, self.state.masks.mask(0), c_max(self.base.spec()));
        Ok(build_observation(self.base.spec(), features, Some(0), 0, 0.0))
    }

    fn step(&mut self, action: f64) -> Result<StepOutcome> {
        let spec = self.base.spec().clone();
        let (flag, beta) = self.state.apply(&spec, action)?;
        let comp = compression_of_masks(&self.state.masks, &spec)?;
        let l = spec.flag_count();
        if self.state.t < l {
            let features = self.features(None, flag)?;
            let obs = build_observation(&spec, features, Some(self.state.t), self.state.t, comp.c);
            return Ok(StepOutcome {
                obs,
                reward: 0.0,
                done: false,
                beta,
                terminal: None,
            });
        }
        let mut net = rebuild(&self.base, &self.state.masks, InitStrategy::Pretrained, &mut self.state.rng)?;
        let mut ft = self.cfg.finetune.clone();
        ft.seed = self.state.rng.random();
        fine_tune(&mut net, &self.split, &ft, 0)?;
        let accuracy = evaluate(&net, &self.split.val)?;
        let reward = self.cfg.reward.terminal(accuracy, comp.c, &self.state.layer_pruned());
        let features = self.features(Some(&net), flag)?;
        let obs = build_observation(&spec, features, None, l, comp.c);
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    /// Raw policy sample before squashing.
    pub action: f64,
    pub beta: f64,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env_id: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub terminal: Terminal,
}

impl EpisodeRecord {
    pub fn betas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.beta).collect()
    }
}

/// Environments visited round-robin, one per episode.
#[derive(Clone)]
pub struct EnvQueue {
    envs: Vec<Box<dyn Environment>>,
    cursor: usize,
}

impl EnvQueue {
    /// All environments must agree on observation width, flag count and
    /// architecture.
    pub fn new(envs: Vec<Box<dyn Environment>>) -> Result<Self> {
        let first = envs
            .first()
            .ok_or_else(|| Error::Config("environment queue needs at least one environment".into()))?;
        let (w, l, arch) = (first.obs_width(), first.flag_count(), first.arch());
        for e in &envs[1..] {
            if e.obs_width() != w || e.flag_count() != l || e.arch() != arch {
                return Err(Error::Config(format!(
                    "environment `{}` ({}, {} flags, width {}) does not match `{}` ({arch}, {l} flags, width {w})",
                    e.id(),
                    e.arch(),
                    e.flag_count(),
                    e.obs_width(),
                    first.id()
                )));
            }
        }
        Ok(Self { envs, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn obs_width(&self) -> usize {
        self.envs[0].obs_width()
    }

    pub fn flag_count(&self) -> usize {
        self.envs[0].flag_count()
    }

    pub fn arch(&self) -> String {
        self.envs[0].arch()
    }

    pub fn envs(&self) -> &[Box<dyn Environment>] {
        &self.envs
    }

    /// Environment for the next episode; the cursor then moves on by one.
    pub fn next_env(&mut self) -> &mut Box<dyn Environment> {
        let i = self.cursor;
        self.cursor = (self.cursor + 1) % self.envs.len();
        &mut self.envs[i]
    }

    /// Resets the next environment.
    pub fn reset(&mut self, seed: u64) -> Result<(usize, Observation)> {
        let i = self.cursor;
        let obs = self.next_env().reset(seed)?;
        Ok((i, obs))
    }

    pub fn env_mut(&mut self, i: usize) -> &mut Box<dyn Environment> {
        &mut self.envs[i]
    }
}
