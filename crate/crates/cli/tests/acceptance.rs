//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Reuses the oracles the per-crate tests use.

#[path = "../../tensor/tests/common/mod.rs"]
#[allow(dead_code)]
mod tensor_common;

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod core_common;

#[path = "../../rl/tests/surrogate_ppo.rs"]
#[allow(dead_code)]
mod surrogate_ppo;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chanprune_cli::config::{ArchFamily, DatasetConfig, ExperimentConfig, ExperimentKind};
use chanprune_cli::pipelines::{self, read_episodes, EPISODES_FILE};
use chanprune_core::data::SyntheticSpec;
use chanprune_core::netzoo::{build_cnet, build_resnet20, InputShape};
use chanprune_core::profiles::{
    compression_of_profile, equally_distributed, keep_count, materialize, random_profile, MaterializeMode,
};
use chanprune_core::pruning::{rebuild, InitStrategy};
use chanprune_core::rewards::{gaussian_reward, hyperbolic_terminal, n2n_reward, RewardConfig};
use chanprune_rl::surrogate::SurrogateEnv;
use chanprune_rl::{EnvQueue, EpisodeRecord};
use core_common::fixtures::{cnet_small, perturbed_net, random_batch, resnet20_4};
use core_common::oracles::{brute_force_count, masked_forward};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const CIFAR: InputShape = InputShape {
    height: 32,
    width: 32,
    channels: 3,
};

fn gradients() -> Outcome {
    use tensor_common::gradcheck::{max_rel_error, ALL_OPS, REL_TOL};
    let mut worst: f64 = 0.0;
    for kind in ALL_OPS {
        for seed in 0..100 {
            let e = max_rel_error(kind, seed);
            ensure(e <= REL_TOL, || format!("{kind:?} seed {seed}: relative error {e:.3e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("{} ops x 100 shapes, worst relative error {worst:.2e}", ALL_OPS.len()))
}

fn mask_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, spec) in [cnet_small(4), resnet20_4(4)].into_iter().enumerate() {
        let net = perturbed_net(spec, 500 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
        let x = random_batch(&mut rng, 3, net.spec().input());
        for s in 0..50 {
            let p = random_profile("x", net.spec().flag_count(), 0.1, 1.0, &mut rng, s).map_err(|e| e.to_string())?;
            let masks = materialize(&p, net.spec().flag_lengths(), &mut rng, MaterializeMode::Bernoulli)
                .map_err(|e| e.to_string())?;
            let small = rebuild(&net, &masks, InitStrategy::Pretrained, &mut rng).map_err(|e| e.to_string())?;
            let d = small.logits(&x).map_err(|e| e.to_string())?.max_abs_diff(&masked_forward(&net, &masks, &x));
            ensure(d <= 1e-5, || format!("{} mask {s}: max-abs {d:.3e}", net.spec().arch_name()))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("100 mask sets, worst max-abs {worst:.2e}"))
}

fn topology() -> Outcome {
    let c = build_cnet(32, 10, CIFAR).map_err(|e| e.to_string())?;
    ensure(c.flag_lengths() == [32; 6], || format!("C-NET(32) lengths {:?}", c.flag_lengths()))?;
    for (w, [a, b, d]) in [(16, [16, 32, 128]), (64, [64, 128, 512])] {
        let r = build_resnet20(w, 10, CIFAR).map_err(|e| e.to_string())?;
        let mut want = vec![a; 5];
        want.extend([b; 4]);
        want.extend([d; 4]);
        ensure(r.flag_lengths() == want.as_slice(), || format!("ResNet-20-{w} lengths {:?}", r.flag_lengths()))?;
    }
    Ok("C-NET(32), ResNet-20-16, ResNet-20-64 match".into())
}

fn cf_oracle() -> Outcome {
    let specs = [
        cnet_small(4),
        build_cnet(32, 10, CIFAR).unwrap(),
        resnet20_4(10),
        build_resnet20(16, 10, CIFAR).unwrap(),
        build_resnet20(64, 10, CIFAR).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in &specs {
        let i = spec.input();
        let count = |kept: &[usize]| brute_force_count(spec.arch(), (i.height, i.width, i.channels), spec.num_classes(), kept);
        let base = count(spec.flag_lengths());
        for s in 0..200 {
            let p = random_profile("x", spec.flag_count(), 0.1, 1.0, &mut rng, s).unwrap();
            let kept: Vec<usize> = p.betas.iter().zip(spec.flag_lengths()).map(|(&b, &c)| keep_count(b, c)).collect();
            let got = compression_of_profile(&p, spec).map_err(|e| e.to_string())?;
            let want = count(&kept);
            ensure(got.base_params == base && got.pruned_params == want, || {
                format!("{} profile {s}: {} vs {want}", spec.arch_name(), got.pruned_params)
            })?;
        }
    }
    Ok(format!("{} architectures x 200 profiles exact", specs.len()))
}

/// `tanh` written out through exponentials, independent of the library.
fn tanh_oracle(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    (1.0 - e) / (1.0 + e) * x.signum()
}

fn hyperbolic_oracle(a: f64, pruned: &[f64], a_e: f64, c_e: f64, thr: f64, tau: f64) -> f64 {
    let step = |x: f64, t: f64| (tanh_oracle((x - t) / tau) + tanh_oracle(t / tau)) / (tanh_oracle((1.0 - t) / tau) + tanh_oracle(t / tau));
    step(a / a_e, thr) * pruned.iter().map(|&x| step(x, c_e)).sum::<f64>()
}

fn rewards() -> Outcome {
    for &(a_e, c_e) in &[(0.9, 0.5), (0.7, 0.25), (1.0, 0.8)] {
        let cfg = RewardConfig::gaussian(a_e, c_e, 0.3);
        ensure(gaussian_reward(a_e, c_e, &cfg) == 1.0, || format!("gaussian({a_e}, {c_e}) != 1"))?;
    }
    let n = 200;
    let grid: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
    for sigma in [0.1, 0.3, 0.5] {
        for c_e in [0.2, 0.5, 0.75] {
            let cfg = RewardConfig::gaussian(0.9, c_e, sigma);
            let best = grid.iter().copied().max_by(|a, b| gaussian_reward(0.9, *a, &cfg).total_cmp(&gaussian_reward(0.9, *b, &cfg))).unwrap();
            ensure((best - c_e).abs() <= 1.0 / n as f64 + 1e-12, || format!("sigma {sigma}: argmax {best} vs {c_e}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    use rand::Rng;
    for _ in 0..1000 {
        let (a, c, a_e) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.1..1.0));
        let cfg = RewardConfig::n2n(a_e);
        let want = (a / a_e) * (1.0 - c) * (1.0 - c);
        let got = n2n_reward(a, c, &cfg);
        ensure((got - want).abs() <= 1e-12, || format!("n2n({a}, {c}) {got} vs {want}"))?;
        let c_e = rng.random_range(0.05..0.95);
        let tau = rng.random_range(0.02..0.5);
        let cfg = RewardConfig::hyperbolic(a_e, c_e, tau);
        let pruned: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = hyperbolic_terminal(a, &pruned, &cfg);
        let want = hyperbolic_oracle(a, &pruned, a_e, c_e, cfg.accuracy_threshold, tau);
        ensure((got - want).abs() <= 1e-9, || format!("hyperbolic {got} vs {want}"))?;
    }
    Ok("gaussian peak and argmax, n2n and hyperbolic oracles agree".into())
}

fn taylor() -> Outcome {
    use core_common::taylor::{taylor_loo_correlations, MIN_SPEARMAN};
    let rho = taylor_loo_correlations();
    let min = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(min >= MIN_SPEARMAN, || format!("spearman per layer {rho:.3?}"))?;
    Ok(format!("spearman per layer {rho:.3?}"))
}

fn surrogate() -> Outcome {
    let mut notes = Vec::new();
    for c_e in [0.5, 0.75] {
        let r = surrogate_ppo::surrogate_run(c_e, 5);
        let ratio = r.rollout_reward / r.target_reward;
        let dc = r.rollout_c - c_e;
        ensure(ratio >= 0.95 && dc.abs() <= surrogate_ppo::SIGMA, || {
            format!("C_e {c_e}: reward ratio {ratio:.3}, C offset {dc:.3}")
        })?;
        notes.push(format!("C_e {c_e}: ratio {ratio:.3}, C {:.3}", r.rollout_c));
    }
    Ok(notes.join("; "))
}

fn noisy(name: &str, seed: u64) -> DatasetConfig {
    let mut s = SyntheticSpec::new(8, 1024, seed);
    s.noise = 1.0;
    let mut d = DatasetConfig::synthetic(name, s);
    d.split_seed = Some(seed);
    d
}

/// Pinned end-to-end configuration: two source sets, one held-out target.
fn end_to_end_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::RlTransfer, "e2e");
    cfg.datasets = vec![noisy("src-a", 8), noisy("src-b", 9)];
    cfg.target = Some(noisy("target", 10));
    cfg.base.epochs = 20;
    cfg.base.seed = 100;
    cfg.finetune.epochs = 5;
    cfg.search.profiles = 60;
    cfg.search.seed = 5;
    cfg.rl.reward.c_e = 0.5;
    cfg.rl.env_epochs = 3;
    cfg.rl.ppo.iterations = 60;
    cfg.rl.ppo.episodes_per_iteration = 8;
    cfg.rl.ppo.seed = 1;
    cfg
}

fn end_to_end(scratch: &Path, episodes: &mut Vec<(PathBuf, usize)>) -> Outcome {
    let dir = scratch.join("e2e");
    let (out, rows) = pipelines::rl_transfer(&end_to_end_config(), &dir).map_err(|e| e.to_string())?;
    episodes.push((dir.join(EPISODES_FILE), 6));
    let r = &rows[0];
    let median = r.bucket_median.ok_or("empty CF bucket on the target")?;
    let msg = format!(
        "profile {:.2?} CF {:.2}: accuracy {:.3} vs bucket median {median:.3} (n {}, percentile {:.0})",
        out.profile.betas,
        r.cf,
        r.accuracy,
        r.bucket_n,
        r.percentile.unwrap_or(0.0)
    );
    ensure(r.bucket_n >= 3 && r.accuracy > median, || msg.clone())?;
    Ok(msg)
}

fn tiny(kind: ExperimentKind, id: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(kind, id);
    cfg.datasets = vec![
        DatasetConfig::synthetic("a", SyntheticSpec::new(4, 256, 7)),
        DatasetConfig::synthetic("b", SyntheticSpec::new(4, 256, 8)),
    ];
    cfg.target = Some(DatasetConfig::synthetic("t", SyntheticSpec::new(4, 256, 9)));
    cfg.seeds = vec![0, 1];
    cfg.cf_grid = vec![1.0, 2.0, 3.0];
    cfg.base.epochs = 4;
    cfg.finetune.epochs = 1;
    cfg.search.profiles = 5;
    cfg.rl.env_epochs = 1;
    cfg.rl.ppo.iterations = 2;
    cfg.rl.ppo.episodes_per_iteration = 4;
    cfg.rl.ppo.minibatch = 8;
    cfg
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(scratch: &Path, episodes: &mut Vec<(PathBuf, usize)>) -> Outcome {
    let profile = scratch.join("half.json");
    equally_distributed("cnet-8", 6, 0.5).unwrap().save(&profile).unwrap();
    let mut resnet = tiny(ExperimentKind::RlTrain, "rl-resnet");
    resnet.arch.family = ArchFamily::Resnet20;
    resnet.arch.width = 4;
    let mut transfer = tiny(ExperimentKind::TransferEval, "transfer-eval");
    transfer.transfer.profiles = vec![profile];
    let configs = vec![
        tiny(ExperimentKind::InitSweep, "init-sweep"),
        tiny(ExperimentKind::MetricSweep, "metric-sweep"),
        tiny(ExperimentKind::ProfileSweep, "profile-sweep"),
        tiny(ExperimentKind::RandomSearch, "random-search"),
        transfer,
        tiny(ExperimentKind::RlTrain, "rl-train"),
        tiny(ExperimentKind::RlTransfer, "rl-transfer"),
        resnet,
    ];
    let mut compared = 0;
    for cfg in &configs {
        let file = scratch.join(format!("{}.toml", cfg.id));
        fs::write(&file, cfg.to_toml().unwrap()).unwrap();
        for root in ["first", "second"] {
            let out = Command::new(env!("CARGO_BIN_EXE_chanprune"))
                .args(["run", "--config", file.to_str().unwrap(), "--out", scratch.join(root).to_str().unwrap()])
                .env_remove("CHANPRUNE_OUT")
                .output()
                .unwrap();
            ensure(out.status.success(), || format!("{}: {}", cfg.id, String::from_utf8_lossy(&out.stderr)))?;
        }
        let (a, b) = (scratch.join("first").join(&cfg.id), scratch.join("second").join(&cfg.id));
        let names = files(&a);
        ensure(names == files(&b), || format!("{}: different file sets", cfg.id))?;
        for n in names.iter().filter(|n| n.file_name().unwrap() != "timings.csv") {
            ensure(fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap(), || {
                format!("{}: {} differs", cfg.id, n.display())
            })?;
            compared += 1;
        }
        if a.join(EPISODES_FILE).exists() {
            let l = if cfg.arch.family == ArchFamily::Resnet20 { 13 } else { 6 };
            episodes.push((a.join(EPISODES_FILE), l));
        }
    }
    Ok(format!("{} pipelines re-run, {compared} files bit-identical", configs.len()))
}

fn check_episode(e: &EpisodeRecord, l: usize) -> Result<(), String> {
    ensure(e.steps.len() == l, || format!("{} seed {}: {} steps, want {l}", e.env_id, e.seed, e.steps.len()))?;
    ensure(e.steps[..l - 1].iter().all(|s| s.reward == 0.0), || format!("{} seed {}: nonzero early reward", e.env_id, e.seed))?;
    ensure(e.steps[l - 1].reward == e.terminal.reward, || format!("{} seed {}: terminal mismatch", e.env_id, e.seed))
}

/// `stored` pairs each episodes file with its network's flag count.
fn episode_structure(stored: &[(PathBuf, usize)]) -> Outcome {
    let mut n = 0;
    for (path, l) in stored {
        let eps = read_episodes(path).map_err(|e| e.to_string())?;
        ensure(!eps.is_empty(), || format!("{} is empty", path.display()))?;
        for e in &eps {
            check_episode(e, *l)?;
            n += 1;
        }
    }
    let spec = build_cnet(32, 10, CIFAR).unwrap();
    let env = SurrogateEnv::new(spec, RewardConfig::gaussian(0.9, 0.5, 0.3), 3).map_err(|e| e.to_string())?;
    let mut queue = EnvQueue::new(vec![Box::new(env)]).map_err(|e| e.to_string())?;
    let policy = chanprune_rl::Policy::new(&Default::default(), queue.arch(), queue.obs_width(), queue.flag_count(), 0);
    for e in chanprune_rl::collect(&policy, &mut queue, 64, 9, false, false).map_err(|e| e.to_string())? {
        check_episode(&e, 6)?;
        n += 1;
    }
    Ok(format!("{n} episodes from {} stored files plus surrogate rollouts", stored.len()))
}

fn run(no: usize, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let took = t0.elapsed();
    let res = res.and_then(|m| {
        ensure(took <= limit, || format!("took {took:.1?}, limit {limit:?}"))?;
        Ok(m)
    });
    match &res {
        Ok(m) => println!("criterion {no:>2}: PASS ({took:.1?}) {m}"),
        Err(m) => println!("criterion {no:>2}: FAIL ({took:.1?}) {m}"),
    }
    res.is_ok()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scratch = tempfile::tempdir().unwrap();
    let mut episodes = Vec::new();
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        run(1, min(2), gradients),
        run(2, min(2), mask_equivalence),
        run(3, Duration::from_secs(1), topology),
        run(4, min(1), cf_oracle),
        run(5, Duration::from_secs(1), rewards),
        run(6, min(5), taylor),
        run(7, min(15), surrogate),
        run(8, min(60), || end_to_end(scratch.path(), &mut episodes)),
        run(9, min(30), || determinism(scratch.path(), &mut episodes)),
        run(10, Duration::from_secs(5), || episode_structure(&episodes)),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
