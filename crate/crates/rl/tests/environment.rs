#[path = "../../core/tests/common/fixtures.rs"]
#[allow(dead_code)]
mod fixtures;

use std::sync::Arc;
use std::time::Instant;

use chanprune_core::netzoo::build_cnet;
use chanprune_core::rewards::{gaussian_reward, RewardConfig};
use chanprune_core::train::TrainConfig;
use chanprune_core::{Error, InputShape, NetworkSpec, TrainedNet};
use chanprune_rl::env::{squash_action, ObsMode, PruningEnv, PruningEnvConfig};
use chanprune_rl::obs::DESCRIPTOR_WIDTH;
use chanprune_rl::surrogate::{profile_c, SurrogateEnv};
use chanprune_rl::{EnvQueue, Environment};

fn cnet16() -> NetworkSpec {
    build_cnet(16, 10, InputShape { height: 16, width: 16, channels: 3 }).unwrap()
}

fn surrogate(seed: u64) -> SurrogateEnv {
    SurrogateEnv::new(cnet16(), RewardConfig::gaussian(0.9, 0.5, 0.3), seed).unwrap()
}

fn real_env(cfg: PruningEnvConfig, zero_weights: bool) -> PruningEnv {
    let split = fixtures::split(4, 256, 3);
    let mut net: TrainedNet<f32> = fixtures::trained(fixtures::cnet_small(4), &split, 2, 3);
    if zero_weights {
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    PruningEnv::new("net-a", Arc::new(net), Arc::new(split), cfg).unwrap()
}

fn env_cfg(reward: RewardConfig) -> PruningEnvConfig {
    PruningEnvConfig::new(reward, TrainConfig::new(0.02, 1, 0))
}

fn play(env: &mut dyn Environment, actions: &[f64]) -> Vec<chanprune_rl::StepOutcome> {
    actions.iter().map(|&a| env.step(a).unwrap()).collect()
}

#[test]
fn queue_visits_round_robin() {
    let envs: Vec<Box<dyn Environment>> =
        (1..=3).map(|i| Box::new(surrogate(i).with_id(format!("{i}"))) as Box<dyn Environment>).collect();
    let mut q = EnvQueue::new(envs).unwrap();
    let order: Vec<String> = (0..6)
        .map(|s| {
            let (i, _) = q.reset(s).unwrap();
            q.envs()[i].id().to_string()
        })
        .collect();
    assert_eq!(order, ["1", "2", "3", "1", "2", "3"]);

    let mut single = EnvQueue::new(vec![Box::new(surrogate(9))]).unwrap();
    assert!((0..3).all(|s| single.reset(s).unwrap().0 == 0));
}

#[test]
fn queue_rejects_mixed_architectures() {
    let other = SurrogateEnv::new(fixtures::cnet_small(10), RewardConfig::gaussian(0.9, 0.5, 0.3), 1).unwrap();
    let err = EnvQueue::new(vec![Box::new(surrogate(1)), Box::new(other)]).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    assert!(matches!(EnvQueue::new(Vec::new()).err().unwrap(), Error::Config(_)));
}

#[test]
fn actions_are_clamped() {
    assert_eq!(squash_action(-7.0), 0.1);
    assert_eq!(squash_action(0.05), 0.1);
    assert_eq!(squash_action(3.0), 1.0);
    assert_eq!(squash_action(0.42), 0.42);
    let mut env = surrogate(2);
    env.reset(0).unwrap();
    assert_eq!(env.step(-100.0).unwrap().beta, 0.1);
}

#[test]
fn reset_observation_starts_unpruned() {
    let mut env = surrogate(4);
    let obs = env.reset(1).unwrap();
    assert_eq!(obs.descriptors[5], 0.0);
    assert_eq!(obs.descriptors[0], 0.0);
    assert_eq!(obs.descriptors[6], 1.0);
    assert!(obs.features.iter().all(|&v| v > 0.0));
}

#[test]
fn minimum_beta_zeroes_all_but_two_of_sixteen() {
    let mut env = surrogate(4);
    env.reset(1).unwrap();
    let out = env.step(0.1).unwrap();
    assert_eq!(out.obs.features.len(), 16);
    assert_eq!(out.obs.features.iter().filter(|&&v| v != 0.0).count(), 2);
}

#[test]
fn padding_entries_are_exactly_zero() {
    // ResNet-20-4: flags of width 4 and 8 pad up to the 32-wide block.
    let spec = fixtures::resnet20_4(10);
    let mut env = SurrogateEnv::new(spec, RewardConfig::gaussian(0.9, 0.5, 0.3), 2).unwrap();
    let obs = env.reset(0).unwrap();
    assert_eq!(obs.features.len(), 32);
    assert!(obs.features[4..].iter().all(|&v| v == 0.0));
    assert!(obs.features[..4].iter().all(|&v| v > 0.0));
    for _ in 0..env.flag_count() {
        let out = env.step(1.0).unwrap();
        assert_eq!(out.obs.width(), 32 + DESCRIPTOR_WIDTH);
        assert!(out.obs.is_finite());
    }
}

#[test]
fn episodes_have_one_step_per_flag_and_terminal_reward_only() {
    for reward in [
        RewardConfig::gaussian(0.9, 0.5, 0.3),
        RewardConfig::n2n(0.9),
        RewardConfig::hyperbolic(0.9, 0.5, 0.1),
    ] {
        let mut env = SurrogateEnv::new(cnet16(), reward, 3).unwrap();
        env.reset(0).unwrap();
        let outs = play(&mut env, &[0.6; 6]);
        assert!(outs[..5].iter().all(|o| o.reward == 0.0 && !o.done && o.terminal.is_none()));
        assert!(outs[5].done && outs[5].terminal.is_some());
        assert!(matches!(env.step(0.5), Err(Error::Usage(_))));
    }
}

#[test]
fn surrogate_episodes_are_bit_identical() {
    let actions = [0.9, 0.3, 0.55, 0.1, 0.77, 0.4];
    let run = || {
        let mut env = surrogate(6);
        let first = env.reset(42).unwrap();
        (first, play(&mut env, &actions))
    };
    assert_eq!(run(), run());
}

#[test]
fn surrogate_episode_is_fast() {
    let mut env = surrogate(6);
    let n = 200;
    let t0 = Instant::now();
    for s in 0..n {
        env.reset(s).unwrap();
        play(&mut env, &[0.5; 6]);
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    assert!(per < 1e-3, "{per} s per episode");
}

#[test]
fn gaussian_reward_peaks_at_target_compression_on_grid() {
    let spec = cnet16();
    let a = 0.8;
    for c_e in [0.3, 0.5, 0.75] {
        let cfg = RewardConfig::gaussian(0.9, c_e, 0.3);
        let grid: Vec<(f64, f64)> = (1..=20)
            .map(|i| {
                let c = profile_c(&spec, &[i as f64 / 20.0; 6]);
                (c, gaussian_reward(a, c, &cfg))
            })
            .collect();
        let best = grid.iter().copied().fold((0.0, f64::MIN), |m, x| if x.1 > m.1 { x } else { m });
        let nearest = grid.iter().map(|g| (g.0 - c_e).abs()).fold(f64::MAX, f64::min);
        assert!(((best.0 - c_e).abs() - nearest).abs() < 1e-12);
    }
}

#[test]
fn unpruned_episode_pays_accuracy_only_term() {
    let split_reward = RewardConfig::gaussian(0.8, 0.5, 0.3);
    let mut env = real_env(env_cfg(split_reward.clone()), false);
    env.reset(0).unwrap();
    let outs = play(&mut env, &[1.0; 6]);
    let t = outs.last().unwrap().terminal.clone().unwrap();
    assert_eq!(t.c, 0.0);
    let expected = t.accuracy / 0.8 * (-(0.5f64.powi(2)) / (2.0 * 0.09)).exp();
    assert!((t.reward - expected).abs() < 1e-12);
    assert!(outs[..5].iter().all(|o| o.reward == 0.0));
}

#[test]
fn real_env_prunes_exact_counts_and_is_deterministic() {
    let run = || {
        let mut env = real_env(env_cfg(RewardConfig::gaussian(0.8, 0.5, 0.3)), false);
        env.reset(5).unwrap();
        let outs = play(&mut env, &[0.5, 0.1, 1.0, 0.25, 0.75, 0.6]);
        (outs, env.masks().retained_counts())
    };
    let (a, counts) = run();
    assert_eq!(counts, vec![4, 1, 8, 2, 6, 5]);
    let (b, _) = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|o| o.obs.is_finite() && o.obs.width() == 8 + DESCRIPTOR_WIDTH));
    // Features of the flag just pruned vanish on removed channels.
    assert_eq!(a[1].obs.features.iter().filter(|&&v| v != 0.0).count(), 1);
}

#[test]
fn base_net_observations_match_partial_on_first_step() {
    let mut cfg = env_cfg(RewardConfig::gaussian(0.8, 0.5, 0.3));
    let mut partial = real_env(cfg.clone(), false);
    cfg.obs_mode = ObsMode::BaseNet;
    let mut base = real_env(cfg, false);
    assert_eq!(partial.reset(1).unwrap(), base.reset(1).unwrap());
}

#[test]
fn zero_weight_net_has_zero_features_but_descriptors() {
    let mut env = real_env(env_cfg(RewardConfig::gaussian(0.8, 0.5, 0.3)), true);
    let obs = env.reset(0).unwrap();
    assert!(obs.features.iter().all(|&v| v == 0.0));
    assert!(obs.descriptors[1] > 0.0 && obs.descriptors[4] > 0.0 && obs.descriptors[6] == 1.0);
}

#[test]
fn step_before_reset_is_usage_error() {
    let mut env = real_env(env_cfg(RewardConfig::n2n(0.8)), false);
    assert!(matches!(env.step(0.5), Err(Error::Usage(_))));
}
