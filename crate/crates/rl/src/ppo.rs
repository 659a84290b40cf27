//! Clipped-surrogate PPO with GAE over a queue of pruning environments.

use std::io::Write;
use std::path::Path;

use chanprune_core::profiles::{Profile, Provenance};
use chanprune_core::{Error, Result};
use chanprune_tensor::checkpoint::Checkpoint;
use chanprune_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvQueue, Environment, EpisodeRecord, StepRecord};
use crate::nn::{flatten_grads, Adam, Mlp, RunningNorm};

const POLICY_FORMAT: &str = "chanprune-policy";
const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_minibatch")]
    pub minibatch: usize,
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    /// Lower bound on the action standard deviation.
    #[serde(default = "d_floor")]
    pub action_noise_floor: f64,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
    /// Initial mean action (a retention fraction).
    #[serde(default = "d_action_init")]
    pub action_init: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_value_coef")]
    pub value_coef: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    #[serde(default = "d_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    /// Episodes collected per update.
    #[serde(default = "d_batch")]
    pub episodes_per_iteration: usize,
    #[serde(default = "d_true")]
    pub normalize_obs: bool,
    #[serde(default = "d_true")]
    pub parallel: bool,
    #[serde(default)]
    pub seed: u64,
}

fn d_clip() -> f64 {
    0.2
}
fn d_lambda() -> f64 {
    0.95
}
fn d_gamma() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    4
}
fn d_minibatch() -> usize {
    64
}
fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_floor() -> f64 {
    0.02
}
fn d_init_std() -> f64 {
    0.15
}
fn d_action_init() -> f64 {
    0.75
}
fn d_lr() -> f64 {
    1e-3
}
fn d_value_coef() -> f64 {
    0.5
}
fn d_grad_norm() -> f64 {
    0.5
}
fn d_iterations() -> usize {
    200
}
fn d_batch() -> usize {
    32
}
fn d_true() -> bool {
    true
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: d_clip(),
            gae_lambda: d_lambda(),
            gamma: d_gamma(),
            epochs: d_epochs(),
            minibatch: d_minibatch(),
            hidden: d_hidden(),
            action_noise_floor: d_floor(),
            init_std: d_init_std(),
            action_init: d_action_init(),
            lr: d_lr(),
            value_coef: d_value_coef(),
            entropy_coef: 0.0,
            max_grad_norm: d_grad_norm(),
            iterations: d_iterations(),
            episodes_per_iteration: d_batch(),
            normalize_obs: true,
            parallel: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("gae_lambda and gamma must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.episodes_per_iteration == 0 {
            return bad("epochs, minibatch and episodes_per_iteration must be positive");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.action_noise_floor > 0.0) || self.init_std < self.action_noise_floor {
            return bad("action_noise_floor must be positive and at most init_std");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Gaussian policy with a state-independent log standard deviation, plus
/// its value function and observation normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub arch: String,
    pub obs_width: usize,
    pub flag_count: usize,
    pub mean_net: Mlp,
    pub value_net: Mlp,
    pub log_std: f64,
    pub action_floor: f64,
    pub norm: Option<RunningNorm>,
}

fn log_prob(a: f64, mu: f64, log_std: f64) -> f64 {
    let z = (a - mu) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl Policy {
    pub fn new(cfg: &PpoConfig, arch: impl Into<String>, obs_width: usize, flag_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![obs_width];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut mean_net = Mlp::new(&sizes, 0.01, &mut rng);
        mean_net.layers.last_mut().expect("output layer").1[0] = cfg.action_init;
        let value_net = Mlp::new(&sizes, 1.0, &mut rng);
        Self {
            arch: arch.into(),
            obs_width,
            flag_count,
            mean_net,
            value_net,
            log_std: cfg.init_std.ln(),
            action_floor: cfg.action_noise_floor,
            norm: cfg.normalize_obs.then(|| RunningNorm::new(obs_width)),
        }
    }

    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.apply(obs),
            None => obs.to_vec(),
        }
    }

    /// Mean action and value for one raw observation.
    pub fn evaluate(&self, obs: &[f64]) -> (f64, f64) {
        let x = self.normalize(obs);
        (self.mean_net.forward(&x, 1).0[0], self.value_net.forward(&x, 1).0[0])
    }

    /// Raw action, its log-probability and the value estimate.
    pub fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> (f64, f64, f64) {
        let (mu, v) = self.evaluate(obs);
        let a = if deterministic {
            mu
        } else {
            let z: f64 = StandardNormal.sample(rng);
            mu + self.std() * z
        };
        (a, log_prob(a, mu, self.log_std), v)
    }

    pub fn check_env(&self, env: &dyn Environment) -> Result<()> {
        if env.arch() != self.arch || env.obs_width() != self.obs_width || env.flag_count() != self.flag_count {
            return Err(Error::Config(format!(
                "policy trained for {} ({} flags, width {}) cannot drive {} ({} flags, width {})",
                self.arch,
                self.flag_count,
                self.obs_width,
                env.arch(),
                env.flag_count(),
                env.obs_width()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f64>> {
        let meta = serde_json::json!({
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "arch": self.arch,
            "obs_width": self.obs_width,
            "flag_count": self.flag_count,
            "sizes": self.mean_net.sizes,
            "log_std": self.log_std,
            "action_floor": self.action_floor,
            "norm": self.norm,
        });
        let mut ck = Checkpoint::new(meta.to_string());
        for (prefix, net) in [("policy", &self.mean_net), ("value", &self.value_net)] {
            for (i, (w, b)) in net.layers.iter().enumerate() {
                let (n_in, n_out) = (net.sizes[i], net.sizes[i + 1]);
                ck.push(format!("{prefix}.{i}.weight"), Tensor::new(&[n_in, n_out], w.clone())?);
                ck.push(format!("{prefix}.{i}.bias"), Tensor::new(&[n_out], b.clone())?);
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<f64>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            format: String,
            version: u32,
            arch: String,
            obs_width: usize,
            flag_count: usize,
            sizes: Vec<usize>,
            log_std: f64,
            action_floor: f64,
            norm: Option<RunningNorm>,
        }
        let meta: Meta = serde_json::from_str(&ck.metadata)?;
        if meta.format != POLICY_FORMAT || meta.version != POLICY_VERSION {
            return Err(Error::Config(format!(
                "not a policy checkpoint (format `{}` version {})",
                meta.format, meta.version
            )));
        }
        let load = |prefix: &str| -> Result<Mlp> {
            let layers = (0..meta.sizes.len() - 1)
                .map(|i| {
                    let get = |kind: &str| {
                        ck.get(&format!("{prefix}.{i}.{kind}"))
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| Error::Config(format!("policy checkpoint lacks {prefix}.{i}.{kind}")))
                    };
                    let (w, b) = (get("weight")?, get("bias")?);
                    if w.len() != meta.sizes[i] * meta.sizes[i + 1] || b.len() != meta.sizes[i + 1] {
                        return Err(Error::Config(format!("policy checkpoint layer {prefix}.{i} has the wrong size")));
                    }
                    Ok((w, b))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Mlp {
                layers,
                sizes: meta.sizes.clone(),
            })
        };
        Ok(Self {
            mean_net: load("policy")?,
            value_net: load("value")?,
            arch: meta.arch,
            obs_width: meta.obs_width,
            flag_count: meta.flag_count,
            log_std: meta.log_std,
            action_floor: meta.action_floor,
            norm: meta.norm,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// SplitMix64 finalizer, used to derive independent per-episode seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plays one episode to completion.
pub fn run_episode(policy: &Policy, env: &mut dyn Environment, seed: u64, deterministic: bool) -> Result<EpisodeRecord> {
    policy.check_env(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xAC7));
    let mut obs = env.reset(seed)?;
    let mut steps = Vec::with_capacity(env.flag_count());
    for _ in 0..env.flag_count() {
        let x = obs.to_vec();
        let (action, log_prob, value) = policy.act(&x, &mut rng, deterministic);
        let out = env.step(action)?;
        steps.push(StepRecord {
            obs: x,
            action,
            beta: out.beta,
            log_prob,
            value,
            reward: out.reward,
        });
        if let Some(terminal) = out.terminal {
            return Ok(EpisodeRecord {
                env_id: env.id().to_string(),
                seed,
                steps,
                terminal,
            });
        }
        obs = out.obs;
    }
    Err(Error::Usage(format!("environment `{}` did not finish within its flag count", env.id())))
}

/// Collects `episodes` episodes, advancing the queue once per episode.
/// Episode `i` is seeded from `(seed, i)` alone, so parallel and serial
/// collection return the same records in the same order.
pub fn collect(
    policy: &Policy,
    queue: &mut EnvQueue,
    episodes: usize,
    seed: u64,
    deterministic: bool,
    parallel: bool,
) -> Result<Vec<EpisodeRecord>> {
    let jobs: Vec<(Box<dyn Environment>, u64)> =
        (0..episodes).map(|i| (queue.next_env().clone(), mix_seed(seed, i as u64))).collect();
    let run = |(mut env, s): (Box<dyn Environment>, u64)| run_episode(policy, env.as_mut(), s, deterministic);
    if parallel {
        jobs.into_par_iter().map(run).collect()
    } else {
        jobs.into_iter().map(run).collect()
    }
}

/// Generalized advantage estimates and value targets for one episode; the
/// state after the last step is terminal.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    pub mean_c: f64,
    pub mean_accuracy: f64,
}

impl IterationStats {
    pub fn from_episodes(iteration: usize, eps: &[EpisodeRecord]) -> Self {
        let n = eps.len().max(1) as f64;
        let r = eps.iter().map(|e| e.terminal.reward);
        Self {
            iteration,
            mean_reward: r.clone().sum::<f64>() / n,
            min_reward: r.clone().fold(f64::INFINITY, f64::min),
            max_reward: r.fold(f64::NEG_INFINITY, f64::max),
            mean_c: eps.iter().map(|e| e.terminal.c).sum::<f64>() / n,
            mean_accuracy: eps.iter().map(|e| e.terminal.accuracy).sum::<f64>() / n,
        }
    }
}

pub fn write_curve(curve: &[IterationStats], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in curve {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Learner state: the policy plus its optimizers.
pub struct PpoTrainer {
    pub cfg: PpoConfig,
    pub policy: Policy,
    pi_opt: Adam,
    v_opt: Adam,
    rng: ChaCha8Rng,
    pub iteration: usize,
}

fn clip_norm(g: &mut [f64], max: f64) {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max {
        g.iter_mut().for_each(|v| *v *= max / n);
    }
}

fn non_finite(what: &str, iteration: usize, detail: impl std::fmt::Display) -> Error {
    Error::Tensor(chanprune_tensor::Error::NonFinite(format!(
        "ppo {what} at iteration {iteration} ({detail})"
    )))
}

impl PpoTrainer {
    pub fn new(cfg: PpoConfig, arch: impl Into<String>, obs_width: usize, flag_count: usize) -> Result<Self> {
        cfg.validate()?;
        let policy = Policy::new(&cfg, arch, obs_width, flag_count, cfg.seed);
        Ok(Self::from_policy(cfg, policy))
    }

    pub fn from_policy(cfg: PpoConfig, policy: Policy) -> Self {
        let pi_opt = Adam::new(policy.mean_net.param_count() + 1, cfg.lr);
        let v_opt = Adam::new(policy.value_net.param_count(), cfg.lr);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x9B0));
        Self {
            cfg,
            policy,
            pi_opt,
            v_opt,
            rng,
            iteration: 0,
        }
    }

    /// One collect-then-update round.
    pub fn iterate(&mut self, queue: &mut EnvQueue) -> Result<IterationStats> {
        Ok(self.iterate_with_records(queue)?.0)
    }

    /// As [`PpoTrainer::iterate`], also returning the collected episodes.
    pub fn iterate_with_records(&mut self, queue: &mut EnvQueue) -> Result<(IterationStats, Vec<EpisodeRecord>)> {
        let seed = mix_seed(self.cfg.seed, 1 + self.iteration as u64);
        let eps = collect(
            &self.policy,
            queue,
            self.cfg.episodes_per_iteration,
            seed,
            false,
            self.cfg.parallel,
        )?;
        let stats = IterationStats::from_episodes(self.iteration, &eps);
        for v in [stats.mean_reward, stats.mean_c, stats.mean_accuracy] {
            if !v.is_finite() {
                return Err(non_finite("reward", self.iteration, v));
            }
        }
        self.update(&eps)?;
        self.iteration += 1;
        Ok((stats, eps))
    }

    /// Clipped-surrogate policy step and value regression on `eps`.
    pub fn update(&mut self, eps: &[EpisodeRecord]) -> Result<UpdateStats> {
        let (cfg, w) = (&self.cfg, self.policy.obs_width);
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut old_lp = Vec::new();
        let mut adv = Vec::new();
        let mut ret = Vec::new();
        for e in eps {
            let r: Vec<f64> = e.steps.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = e.steps.iter().map(|s| s.value).collect();
            let (a, g) = gae(&r, &v, cfg.gamma, cfg.gae_lambda);
            adv.extend(a);
            ret.extend(g);
            for s in &e.steps {
                obs.extend(self.policy.normalize(&s.obs));
                actions.push(s.action);
                old_lp.push(s.log_prob);
            }
        }
        let n = actions.len();
        if n == 0 {
            return Err(Error::Usage("ppo update needs at least one step".into()));
        }
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));

        let mut idx: Vec<usize> = (0..n).collect();
        let (mut pl_sum, mut vl_sum, mut batches) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            idx.shuffle(&mut self.rng);
            for mb in idx.chunks(cfg.minibatch) {
                let m = mb.len();
                let x: Vec<f64> = mb.iter().flat_map(|&i| obs[i * w..(i + 1) * w].iter().copied()).collect();

                let (mu, cache) = self.policy.mean_net.forward(&x, m);
                let log_std = self.policy.log_std;
                let var = (2.0 * log_std).exp();
                let mut d_mu = vec![0.0; m];
                let mut d_log_std = -cfg.entropy_coef;
                let mut pl = 0.0;
                for (k, &i) in mb.iter().enumerate() {
                    let lp = log_prob(actions[i], mu[k], log_std);
                    let ratio = (lp - old_lp[i]).exp();
                    let unclipped = ratio * adv[i];
                    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv[i];
                    pl -= unclipped.min(clipped) / m as f64;
                    if unclipped <= clipped {
                        // d(-ratio * A)/d logp = -ratio * A
                        let g = -unclipped / m as f64;
                        let diff = actions[i] - mu[k];
                        d_mu[k] = g * diff / var;
                        d_log_std += g * (diff * diff / var - 1.0);
                    }
                }
                let mut g_pi = flatten_grads(&self.policy.mean_net.backward(&cache, &d_mu));
                g_pi.push(d_log_std);

                let (v, vcache) = self.policy.value_net.forward(&x, m);
                let mut vl = 0.0;
                let d_v: Vec<f64> = mb
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let e = v[k] - ret[i];
                        vl += 0.5 * e * e / m as f64;
                        cfg.value_coef * e / m as f64
                    })
                    .collect();
                let mut g_v = flatten_grads(&self.policy.value_net.backward(&vcache, &d_v));

                if !pl.is_finite() || !vl.is_finite() || g_pi.iter().chain(&g_v).any(|g| !g.is_finite()) {
                    return Err(non_finite(
                        "loss",
                        self.iteration,
                        format!("policy loss {pl}, value loss {vl}, log std {log_std}"),
                    ));
                }
                clip_norm(&mut g_pi, cfg.max_grad_norm);
                clip_norm(&mut g_v, cfg.max_grad_norm);

                let mut p = self.policy.mean_net.flat();
                p.push(self.policy.log_std);
                self.pi_opt.step(&mut p, &g_pi);
                self.policy.log_std = p.pop().expect("log std").max(self.policy.action_floor.ln());
                self.policy.mean_net.set_flat(&p);
                let mut q = self.policy.value_net.flat();
                self.v_opt.step(&mut q, &g_v);
                self.policy.value_net.set_flat(&q);

                pl_sum += pl;
                vl_sum += vl;
                batches += 1;
            }
        }
        if cfg.lr > 0.0 {
            if let Some(norm) = &mut self.policy.norm {
                let raw: Vec<f64> = eps.iter().flat_map(|e| e.steps.iter().flat_map(|s| s.obs.iter().copied())).collect();
                norm.update(&raw, w);
            }
        }
        Ok(UpdateStats {
            policy_loss: pl_sum / batches as f64,
            value_loss: vl_sum / batches as f64,
        })
    }
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<IterationStats>,
}

/// Runs `cfg.iterations` rounds; `on_iteration` sees each row of the
/// training curve and its episodes as they are produced.
pub fn ppo_train(
    queue: &mut EnvQueue,
    cfg: &PpoConfig,
    mut on_iteration: impl FnMut(&IterationStats, &[EpisodeRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = PpoTrainer::new(cfg.clone(), queue.arch(), queue.obs_width(), queue.flag_count())?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (s, eps) = trainer.iterate_with_records(queue)?;
        on_iteration(&s, &eps)?;
        curve.push(s);
    }
    Ok(TrainOutcome {
        policy: trainer.policy,
        curve,
    })
}

/// Plays one episode and returns the betas as a profile.
pub fn rollout_profile(
    policy: &Policy,
    env: &mut dyn Environment,
    deterministic: bool,
    seed: u64,
    checkpoint: impl Into<String>,
) -> Result<Profile> {
    let rec = run_episode(policy, env, seed, deterministic)?;
    Profile::new(
        env.arch(),
        rec.betas(),
        Provenance::RlPolicy {
            checkpoint: checkpoint.into(),
        },
        seed,
    )
}
