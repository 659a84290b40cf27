//! Experiment pipelines: base training, pruning sweeps, random search,
//! transfer evaluation and RL search.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use chanprune_core::data::Split;
use chanprune_core::metrics::Metric;
use chanprune_core::profiles::{
    compression_of_profile, equally_distributed, random_profile, solve_k_for_cf, Direction, Family, Profile,
    Provenance, BETA_MIN,
};
use chanprune_core::pruning::{prune_and_finetune, InitStrategy, Pipeline, PruneJob, Selection};
use chanprune_core::train::{evaluate, fine_tune, TrainConfig};
use chanprune_core::{Error, NetworkSpec, Result, TrainedNet};
use chanprune_rl::env::{PruningEnv, PruningEnvConfig};
use chanprune_rl::ppo::{mix_seed, ppo_train, rollout_profile, write_curve, IterationStats, Policy};
use chanprune_rl::{EnvQueue, Environment, EpisodeRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentConfig, ExperimentKind};
use crate::run::{read_results, ResultRow, ResultsLog, RunDir, RESULTS_FILE};

pub const POLICY_FILE: &str = "policy.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const TRANSFER_FILE: &str = "transfer.csv";
pub const TOP_FILE: &str = "top.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// A trained base network and the split it was trained on.
#[derive(Clone)]
pub struct Base {
    pub id: String,
    pub seed: u64,
    pub net: Arc<TrainedNet<f32>>,
    pub split: Arc<Split>,
    pub accuracy: f64,
}

pub fn load_split(d: &DatasetConfig, val_fraction: f64) -> Result<Split> {
    d.load()?.split(val_fraction, d.split_seed())
}

fn unpruned(spec: &NetworkSpec) -> Result<Profile> {
    equally_distributed(&spec.arch_name(), spec.flag_count(), 1.0)
}

/// Trains (or reloads from `bases/`) every base network of `datasets`.
/// Seeds are `base.seed + offset + i` in dataset-major order.
pub fn prepare_bases(
    cfg: &ExperimentConfig,
    run: &RunDir,
    log: &mut ResultsLog,
    datasets: &[DatasetConfig],
    offset: u64,
) -> Result<Vec<Base>> {
    fs::create_dir_all(run.path("bases"))?;
    let mut out = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        let split = Arc::new(load_split(d, cfg.val_fraction)?);
        let spec = cfg.spec_for(&split.train)?;
        let profile_ref = run.save_profile("unpruned", &unpruned(&spec)?)?;
        for j in 0..cfg.base.nets_per_dataset {
            let seed = cfg.base.seed + offset + (di * cfg.base.nets_per_dataset + j) as u64;
            let id = format!("{}-{j}", d.label(di));
            let path = run.path(format!("bases/{id}.ckpt"));
            let t0 = Instant::now();
            let net = if path.exists() {
                TrainedNet::<f32>::load(&path)?.0
            } else {
                let mut net = TrainedNet::<f32>::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed));
                let mut tc = TrainConfig::new(cfg.base.lr, cfg.base.epochs, seed);
                tc.batch_size = cfg.base.batch_size;
                fine_tune(&mut net, &split, &tc, 0).map_err(|e| annotate(e, &id))?;
                net.save(&path, None)?;
                net
            };
            let accuracy = evaluate(&net, &split.val)?;
            log.append(
                ResultRow {
                    experiment: "base".into(),
                    seed,
                    base: id.clone(),
                    profile: profile_ref.clone(),
                    cf: 1.0,
                    c: 0.0,
                    accuracy,
                },
                t0.elapsed().as_secs_f64(),
            )?;
            out.push(Base {
                id,
                seed,
                net: Arc::new(net),
                split: split.clone(),
                accuracy,
            });
        }
    }
    Ok(out)
}

fn annotate(e: Error, what: &str) -> Error {
    match e {
        Error::Layer { layer, source } => Error::Layer {
            layer: format!("{what}: {layer}"),
            source,
        },
        other => other,
    }
}

/// One prune-and-fine-tune evaluation.
#[derive(Clone, Debug)]
pub struct Cell {
    pub experiment: String,
    pub seed: u64,
    pub base: usize,
    pub profile_ref: String,
    pub profile: Profile,
    pub init: InitStrategy,
    pub metric: Metric,
    pub pipeline: Pipeline,
}

/// Depends only on the repetition seed, the profile's own seed and the
/// base network, so a profile re-evaluated elsewhere reproduces exactly.
pub fn job_seed(rep: u64, profile_seed: u64, base_seed: u64) -> u64 {
    mix_seed(mix_seed(rep, profile_seed), base_seed)
}

fn run_cell(cfg: &ExperimentConfig, bases: &[Base], cell: &Cell) -> Result<(ResultRow, f64)> {
    let t0 = Instant::now();
    let base = &bases[cell.base];
    cell.profile.check_spec(base.net.spec())?;
    let seed = job_seed(cell.seed, cell.profile.seed, base.seed);
    let mut finetune = TrainConfig::new(cfg.finetune.lr, cfg.finetune.epochs, seed);
    finetune.batch_size = cfg.finetune.batch_size;
    let job = PruneJob {
        selection: Selection::Counts {
            keep: cell.profile.keep_counts(base.net.spec().flag_lengths()),
            metric: cell.metric,
        },
        init: cell.init,
        finetune,
        pipeline: cell.pipeline,
        seed,
    };
    let out = prune_and_finetune(base.net.as_ref(), &job, &base.split).map_err(|e| annotate(e, &base.id))?;
    let row = ResultRow {
        experiment: cell.experiment.clone(),
        seed: cell.seed,
        base: base.id.clone(),
        profile: cell.profile_ref.clone(),
        cf: out.compression.cf,
        c: out.compression.c,
        accuracy: out.accuracy,
    };
    Ok((row, t0.elapsed().as_secs_f64()))
}

fn workers(cfg: &ExperimentConfig) -> usize {
    if cfg.workers == 0 {
        rayon::current_num_threads().max(1)
    } else {
        cfg.workers
    }
}

/// Evaluates every cell not already in the log. Cells run concurrently in
/// chunks; rows are appended in cell order regardless of completion order.
pub fn execute(cfg: &ExperimentConfig, bases: &[Base], cells: &[Cell], log: &mut ResultsLog) -> Result<()> {
    let pending: Vec<&Cell> = cells
        .iter()
        .filter(|c| {
            let key = (c.experiment.clone(), c.seed, bases[c.base].id.clone(), c.profile_ref.clone());
            !log.contains(&key)
        })
        .collect();
    for chunk in pending.chunks(workers(cfg)) {
        let rows: Vec<Result<(ResultRow, f64)>> = chunk.par_iter().map(|c| run_cell(cfg, bases, c)).collect();
        for r in rows {
            let (row, secs) = r?;
            log.append(row, secs)?;
        }
    }
    Ok(())
}

fn cells_for(
    cfg: &ExperimentConfig,
    bases: &[Base],
    experiment: &str,
    profiles: &[(String, Profile)],
    init: InitStrategy,
    metric: Metric,
    pipeline: Pipeline,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (r, p) in profiles {
        for &seed in &cfg.seeds {
            for b in 0..bases.len() {
                cells.push(Cell {
                    experiment: experiment.to_string(),
                    seed,
                    base: b,
                    profile_ref: r.clone(),
                    profile: p.clone(),
                    init,
                    metric,
                    pipeline,
                });
            }
        }
    }
    cells
}

fn open_run(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunDir, ResultsLog)> {
    cfg.validate()?;
    let run = RunDir::open(dir, cfg)?;
    let log = run.results()?;
    Ok((run, log))
}

fn manifest(cfg: &ExperimentConfig, bases: &[Base]) -> serde_json::Value {
    let base_seeds: BTreeMap<&str, u64> = bases.iter().map(|b| (b.id.as_str(), b.seed)).collect();
    serde_json::json!({
        "kind": cfg.kind.name(),
        "seeds": cfg.seeds,
        "base_seeds": base_seeds,
        "search_seed": cfg.search.seed,
        "ppo_seed": cfg.rl.ppo.seed,
        "rollout_seed": cfg.rl.rollout_seed,
    })
}

// ---------------------------------------------------------------- bases

pub fn train_base(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Base>> {
    let (run, mut log) = open_run(cfg, dir)?;
    let mut bases = prepare_bases(cfg, &run, &mut log, &cfg.datasets, 0)?;
    if let Some(t) = &cfg.target {
        bases.extend(prepare_bases(cfg, &run, &mut log, std::slice::from_ref(t), target_offset(cfg))?);
    }
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    Ok(bases)
}

fn target_offset(cfg: &ExperimentConfig) -> u64 {
    (cfg.datasets.len() * cfg.base.nets_per_dataset) as u64
}

// ---------------------------------------------------------------- prune

/// Prunes every base network of the source datasets with each profile.
pub fn prune(cfg: &ExperimentConfig, dir: &Path, profiles: &[Profile]) -> Result<Vec<ResultRow>> {
    let (run, mut log) = open_run(cfg, dir)?;
    let bases = prepare_bases(cfg, &run, &mut log, &cfg.datasets, 0)?;
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    let mut named = Vec::new();
    for (i, p) in profiles.iter().enumerate() {
        p.check_spec(bases[0].net.spec())?;
        named.push((run.save_profile(&format!("prune-{i:04}"), p)?, p.clone()));
    }
    let cells = cells_for(cfg, &bases, "prune", &named, cfg.finetune.init, Metric::Random, cfg.finetune.pipeline);
    execute(cfg, &bases, &cells, &mut log)?;
    Ok(log.rows().iter().filter(|r| r.experiment == "prune").cloned().collect())
}

// ---------------------------------------------------------------- search

/// `n` seeded random profiles with CF at most `max_cf`; profile `i`
/// carries seed `mix(search.seed, i)`.
pub fn draw_search_profiles(cfg: &ExperimentConfig, spec: &NetworkSpec) -> Result<Vec<Profile>> {
    let s = &cfg.search;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(s.seed, 0x5EA2C4));
    (0..s.profiles)
        .map(|i| {
            for _ in 0..10_000 {
                let p = random_profile(&spec.arch_name(), spec.flag_count(), s.lo, s.hi, &mut rng, mix_seed(s.seed, i as u64))?;
                if compression_of_profile(&p, spec)?.cf <= s.max_cf {
                    return Ok(p);
                }
            }
            Err(Error::Config(format!(
                "no random profile in [{}, {}] stays under CF {}",
                s.lo, s.hi, s.max_cf
            )))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileStat {
    pub profile: String,
    pub cf: f64,
    pub mean_accuracy: f64,
    pub n: usize,
}

/// Mean accuracy per profile over every row of `experiment`.
pub fn profile_stats(rows: &[ResultRow], experiment: &str) -> Vec<ProfileStat> {
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.experiment == experiment) {
        let e = acc.entry(&r.profile).or_insert((r.cf, 0.0, 0));
        e.1 += r.accuracy;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(p, (cf, sum, n))| ProfileStat {
            profile: p.to_string(),
            cf,
            mean_accuracy: sum / n as f64,
            n,
        })
        .collect()
}

/// Members of `stats` whose CF lies within `bucket * cf` of `cf`.
pub fn window(stats: &[ProfileStat], cf: f64, bucket: f64) -> Vec<&ProfileStat> {
    stats.iter().filter(|s| (s.cf - cf).abs() <= bucket * cf + 1e-12).collect()
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Share (in percent) of the window scoring at or below `accuracy`.
pub fn percentile(window: &[&ProfileStat], accuracy: f64) -> Option<f64> {
    if window.is_empty() {
        return None;
    }
    let below = window.iter().filter(|s| s.mean_accuracy <= accuracy).count();
    Some(100.0 * below as f64 / window.len() as f64)
}

fn search_on(cfg: &ExperimentConfig, run: &RunDir, log: &mut ResultsLog, bases: &[Base]) -> Result<Vec<ProfileStat>> {
    let spec = bases[0].net.spec();
    let named = draw_search_profiles(cfg, spec)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| Ok((run.save_profile(&format!("search-{i:04}"), &p)?, p)))
        .collect::<Result<Vec<_>>>()?;
    let cells = cells_for(cfg, bases, "search", &named, cfg.finetune.init, Metric::Random, cfg.finetune.pipeline);
    execute(cfg, bases, &cells, log)?;
    Ok(profile_stats(log.rows(), "search"))
}

/// Random search over the source datasets' base nets. Every profile that
/// is the best within its own CF window is exported as `profiles/top-*`.
pub fn random_search(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ProfileStat>> {
    let (run, mut log) = open_run(cfg, dir)?;
    let bases = prepare_bases(cfg, &run, &mut log, &cfg.datasets, 0)?;
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    let stats = search_on(cfg, &run, &mut log, &bases)?;
    let mut top = Vec::new();
    for s in &stats {
        let w = window(&stats, s.cf, cfg.search.bucket);
        if w.iter().all(|o| o.mean_accuracy <= s.mean_accuracy) {
            let p = Profile::load(run.path(&s.profile))?;
            let name = Path::new(&s.profile).file_stem().and_then(|n| n.to_str()).unwrap_or("profile");
            let rel = run.save_profile(&name.replace("search-", "top-"), &p)?;
            top.push(ProfileStat {
                profile: rel,
                n: w.len(),
                ..s.clone()
            });
        }
    }
    top.sort_by(|a, b| a.cf.total_cmp(&b.cf));
    write_rows(&run.path(TOP_FILE), &top)?;
    Ok(stats)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- transfer

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferRow {
    pub profile: String,
    pub source: String,
    pub cf: f64,
    pub accuracy: f64,
    pub bucket_n: usize,
    pub bucket_median: Option<f64>,
    pub percentile: Option<f64>,
}

/// Prunes the target's base nets with each profile and ranks the result
/// against the target's own random-search distribution at matching CF.
fn transfer_onto(
    cfg: &ExperimentConfig,
    run: &RunDir,
    log: &mut ResultsLog,
    profiles: &[(String, Profile)],
) -> Result<Vec<TransferRow>> {
    let target = cfg.target.as_ref().ok_or_else(|| Error::Config("transfer needs a target dataset".into()))?;
    let bases = prepare_bases(cfg, run, log, std::slice::from_ref(target), target_offset(cfg))?;
    let spec = bases[0].net.spec();
    let mut named = Vec::new();
    for (i, (source, p)) in profiles.iter().enumerate() {
        p.check_spec(spec)?;
        named.push((run.save_profile(&format!("transfer-{i:04}"), p)?, p.clone(), source.clone()));
    }
    let search = search_on(cfg, run, log, &bases)?;
    let pairs: Vec<(String, Profile)> = named.iter().map(|(r, p, _)| (r.clone(), p.clone())).collect();
    let cells = cells_for(cfg, &bases, "transfer", &pairs, cfg.finetune.init, Metric::Random, cfg.finetune.pipeline);
    execute(cfg, &bases, &cells, log)?;
    let stats = profile_stats(log.rows(), "transfer");
    let rows = named
        .iter()
        .map(|(r, _, source)| {
            let s = stats
                .iter()
                .find(|s| &s.profile == r)
                .ok_or_else(|| Error::Usage(format!("no transfer rows for {r}")))?;
            let w = window(&search, s.cf, cfg.search.bucket);
            let means: Vec<f64> = w.iter().map(|x| x.mean_accuracy).collect();
            Ok(TransferRow {
                profile: r.clone(),
                source: source.clone(),
                cf: s.cf,
                accuracy: s.mean_accuracy,
                bucket_n: w.len(),
                bucket_median: median(&means),
                percentile: percentile(&w, s.mean_accuracy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_rows(&run.path(TRANSFER_FILE), &rows)?;
    Ok(rows)
}

pub fn transfer_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<TransferRow>> {
    let (run, mut log) = open_run(cfg, dir)?;
    let profiles = cfg
        .transfer
        .profiles
        .iter()
        .map(|p| Ok((p.display().to_string(), Profile::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = transfer_onto(cfg, &run, &mut log, &profiles)?;
    let all = read_results(&run.path(RESULTS_FILE))?;
    let ids: Vec<String> = all.iter().filter(|r| r.experiment == "base").map(|r| r.base.clone()).collect();
    run.write_seed_manifest(&serde_json::json!({
        "kind": cfg.kind.name(),
        "seeds": cfg.seeds,
        "bases": ids,
        "search_seed": cfg.search.seed,
    }))?;
    Ok(rows)
}

// ---------------------------------------------------------------- sweeps

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepFamily {
    Equal,
    Increasing,
    Decreasing,
    /// A fixed seeded shape `r`, raised to a power `s` to set the CF.
    Random,
}

impl SweepFamily {
    pub fn name(self) -> &'static str {
        match self {
            SweepFamily::Equal => "equal",
            SweepFamily::Increasing => "increasing",
            SweepFamily::Decreasing => "decreasing",
            SweepFamily::Random => "random",
        }
    }

    fn core(self) -> Option<Family> {
        match self {
            SweepFamily::Equal => Some(Family::Equal),
            SweepFamily::Increasing => Some(Family::Ramp {
                direction: Direction::Increasing,
            }),
            SweepFamily::Decreasing => Some(Family::Ramp {
                direction: Direction::Decreasing,
            }),
            SweepFamily::Random => None,
        }
    }
}

fn shaped(spec: &NetworkSpec, shape: &[f64], s: f64, seed: u64) -> Result<Profile> {
    let betas = shape.iter().map(|r| r.powf(s).clamp(BETA_MIN, 1.0)).collect();
    let mut p = Profile::new(spec.arch_name(), betas, Provenance::Manual, 0)?;
    p.seed = seed;
    Ok(p)
}

/// Family member whose CF is closest to `target`: the bisection solver
/// first, then a dense parameter scan when steps in the CF curve skip over
/// the target.
pub fn profile_for_cf(spec: &NetworkSpec, family: SweepFamily, target: f64, shape: &[f64], seed: u64) -> Result<Profile> {
    let make = |x: f64| -> Result<Profile> {
        match family.core() {
            Some(f) => f.profile(spec, x),
            None => shaped(spec, shape, x, seed),
        }
    };
    if let Some(f) = family.core() {
        if let Ok(k) = solve_k_for_cf(spec, f, target) {
            return make(k);
        }
    }
    let (lo, hi) = if family.core().is_some() { (BETA_MIN, 1.0) } else { (0.0, 25.0) };
    let mut best: Option<(f64, Profile)> = None;
    for i in 0..=2000 {
        let x = lo + (hi - lo) * i as f64 / 2000.0;
        let p = make(x)?;
        let d = (compression_of_profile(&p, spec)?.cf - target).abs();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, p));
        }
    }
    Ok(best.expect("nonempty scan").1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub target_cf: f64,
    pub cf: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

struct Curve {
    label: String,
    init: InitStrategy,
    metric: Metric,
    family: SweepFamily,
    pipeline: Pipeline,
}

/// Runs one of the three sweep studies and writes `curves/<label>.csv`
/// for each curve. Returns the curve labels.
pub fn sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<String>> {
    let (run, mut log) = open_run(cfg, dir)?;
    let bases = prepare_bases(cfg, &run, &mut log, &cfg.datasets, 0)?;
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    let kind = cfg.kind.name();
    let ft = &cfg.finetune;
    let curves: Vec<Curve> = match cfg.kind {
        ExperimentKind::InitSweep => [InitStrategy::Pretrained, InitStrategy::Random]
            .into_iter()
            .map(|init| Curve {
                label: match init {
                    InitStrategy::Random => "random".into(),
                    _ => "pretrained".into(),
                },
                init,
                metric: Metric::Random,
                family: SweepFamily::Equal,
                pipeline: ft.pipeline,
            })
            .collect(),
        ExperimentKind::MetricSweep => [Metric::Random, Metric::L1, Metric::Taylor]
            .into_iter()
            .map(|metric| Curve {
                label: metric.name().to_string(),
                init: ft.init,
                metric,
                family: SweepFamily::Equal,
                // Taylor scores are only meaningful on the net being pruned,
                // so that curve always prunes stage by stage.
                pipeline: match (metric, ft.pipeline) {
                    (Metric::Taylor, Pipeline::OneShot) => Pipeline::layerwise(),
                    (_, p) => p,
                },
            })
            .collect(),
        ExperimentKind::ProfileSweep => [
            SweepFamily::Equal,
            SweepFamily::Increasing,
            SweepFamily::Decreasing,
            SweepFamily::Random,
        ]
        .into_iter()
        .map(|family| Curve {
            label: family.name().into(),
            init: ft.init,
            metric: Metric::Random,
            family,
            pipeline: ft.pipeline,
        })
        .collect(),
        other => return Err(Error::Config(format!("{} is not a sweep", other.name()))),
    };
    let spec = bases[0].net.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.search.seed, 0x5A4E));
    let shape = random_profile(&spec.arch_name(), spec.flag_count(), 0.2, 1.0, &mut rng, 0)?.betas;
    fs::create_dir_all(run.path("curves"))?;
    let mut labels = Vec::new();
    for curve in &curves {
        let experiment = format!("{kind}/{}", curve.label);
        let mut named = Vec::new();
        for &target in &cfg.cf_grid {
            let seed = mix_seed(cfg.search.seed, target.to_bits());
            let mut p = profile_for_cf(spec, curve.family, target, &shape, seed)?;
            p.seed = seed;
            let rel = run.save_profile(&format!("{}-{}-cf{target:.2}", kind, curve.label), &p)?;
            named.push((target, rel, p));
        }
        let pairs: Vec<(String, Profile)> = named.iter().map(|(_, r, p)| (r.clone(), p.clone())).collect();
        let cells = cells_for(cfg, &bases, &experiment, &pairs, curve.init, curve.metric, curve.pipeline);
        execute(cfg, &bases, &cells, &mut log)?;
        let points: Vec<CurvePoint> = named
            .iter()
            .map(|(target, rel, _)| {
                let rows: Vec<&ResultRow> =
                    log.rows().iter().filter(|r| r.experiment == experiment && &r.profile == rel).collect();
                let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
                let (m, s) = mean_std(&accs);
                CurvePoint {
                    target_cf: *target,
                    cf: rows.first().map(|r| r.cf).unwrap_or(f64::NAN),
                    mean_accuracy: m,
                    std_accuracy: s,
                    n: accs.len(),
                }
            })
            .collect();
        write_rows(&run.path(format!("curves/{}.csv", curve.label)), &points)?;
        labels.push(curve.label.clone());
    }
    Ok(labels)
}

// ---------------------------------------------------------------- rl

pub struct RlOutcome {
    pub policy: Policy,
    pub curve: Vec<IterationStats>,
    pub profile: Profile,
    pub profile_ref: String,
}

fn env_for(cfg: &ExperimentConfig, base: &Base) -> Result<PruningEnv> {
    let reward = cfg.rl.reward.resolve(base.accuracy);
    let mut ft = TrainConfig::new(cfg.finetune.lr, cfg.rl.env_epochs, 0);
    ft.batch_size = cfg.finetune.batch_size;
    let mut env_cfg = PruningEnvConfig::new(reward, ft);
    env_cfg.obs_mode = cfg.rl.obs_mode;
    env_cfg.obs_samples = cfg.rl.obs_samples;
    PruningEnv::new(base.id.clone(), base.net.clone(), base.split.clone(), env_cfg)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn read_curve(path: &Path) -> Result<Vec<IterationStats>> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn train_policy(cfg: &ExperimentConfig, run: &RunDir, bases: &[Base]) -> Result<(Policy, Vec<IterationStats>)> {
    let policy_path = run.path(POLICY_FILE);
    let curve_path = run.path(CURVE_FILE);
    if policy_path.exists() && curve_path.exists() {
        let curve = read_curve(&curve_path)?;
        if curve.len() == cfg.rl.ppo.iterations {
            return Ok((Policy::load(&policy_path)?, curve));
        }
    }
    let envs = bases
        .iter()
        .map(|b| Ok(Box::new(env_for(cfg, b)?) as Box<dyn Environment>))
        .collect::<Result<Vec<_>>>()?;
    let mut queue = EnvQueue::new(envs)?;
    let mut episodes = BufWriter::new(File::create(run.path(EPISODES_FILE))?);
    let mut curve_w = csv::Writer::from_path(&curve_path)?;
    let out = ppo_train(&mut queue, &cfg.rl.ppo, |stats, eps| {
        curve_w.serialize(stats)?;
        curve_w.flush()?;
        for e in eps {
            serde_json::to_writer(&mut episodes, e)?;
            episodes.write_all(b"\n")?;
        }
        Ok(())
    })?;
    episodes.flush()?;
    drop(curve_w);
    let mut buf = Vec::new();
    write_curve(&out.curve, &mut buf)?;
    fs::write(&curve_path, buf)?;
    out.policy.save(&policy_path)?;
    Ok((out.policy, out.curve))
}

fn rl_core(cfg: &ExperimentConfig, run: &RunDir, log: &mut ResultsLog) -> Result<(Vec<Base>, RlOutcome)> {
    let bases = prepare_bases(cfg, run, log, &cfg.datasets, 0)?;
    let (policy, curve) = train_policy(cfg, run, &bases)?;
    let mut env = env_for(cfg, &bases[0])?;
    let profile = rollout_profile(&policy, &mut env, true, cfg.rl.rollout_seed, POLICY_FILE)?;
    let profile_ref = run.save_profile("rl-policy", &profile)?;
    Ok((
        bases,
        RlOutcome {
            policy,
            curve,
            profile,
            profile_ref,
        },
    ))
}

/// PPO over a queue holding one environment per source base network; the
/// policy, its training curve, every episode and a deterministic rollout
/// profile land in the run directory.
pub fn rl_train(cfg: &ExperimentConfig, dir: &Path) -> Result<RlOutcome> {
    let (run, mut log) = open_run(cfg, dir)?;
    let (bases, out) = rl_core(cfg, &run, &mut log)?;
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    Ok(out)
}

/// `rl_train`, then out-of-the-box transfer of the rolled-out profile to
/// the target dataset.
pub fn rl_transfer(cfg: &ExperimentConfig, dir: &Path) -> Result<(RlOutcome, Vec<TransferRow>)> {
    let (run, mut log) = open_run(cfg, dir)?;
    let (bases, out) = rl_core(cfg, &run, &mut log)?;
    run.write_seed_manifest(&manifest(cfg, &bases))?;
    let rows = transfer_onto(cfg, &run, &mut log, &[(out.profile_ref.clone(), out.profile.clone())])?;
    Ok((out, rows))
}

/// Deterministic rollout of a saved policy on the first source base net.
pub fn rl_rollout(cfg: &ExperimentConfig, dir: &Path, policy_path: &Path, deterministic: bool) -> Result<(Profile, String)> {
    let (run, mut log) = open_run(cfg, dir)?;
    let bases = prepare_bases(cfg, &run, &mut log, &cfg.datasets, 0)?;
    let policy = Policy::load(policy_path)?;
    let mut env = env_for(cfg, &bases[0])?;
    let p = rollout_profile(&policy, &mut env, deterministic, cfg.rl.rollout_seed, policy_path.display().to_string())?;
    let rel = run.save_profile("rollout", &p)?;
    Ok((p, rel))
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub profile: String,
    pub cf: f64,
    pub c: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n: usize,
}

/// Aggregates a run's results per (experiment, profile) into `summary.csv`.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join(RESULTS_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("{} has no results", dir.display())));
    }
    let rows = read_results(&path)?;
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.experiment.clone(), r.profile.clone())).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((experiment, profile), rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (m, s) = mean_std(&accs);
            SummaryRow {
                experiment,
                profile,
                cf: rs[0].cf,
                c: rs[0].c,
                mean_accuracy: m,
                std_accuracy: s,
                n: accs.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.experiment.cmp(&b.experiment).then(a.cf.total_cmp(&b.cf)).then(a.profile.cmp(&b.profile)));
    write_rows(&dir.join(SUMMARY_FILE), &out)?;
    Ok(out)
}

/// Runs whatever the config's kind names.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match cfg.kind {
        ExperimentKind::InitSweep | ExperimentKind::MetricSweep | ExperimentKind::ProfileSweep => {
            sweep(cfg, dir).map(drop)
        }
        ExperimentKind::RandomSearch => random_search(cfg, dir).map(drop),
        ExperimentKind::TransferEval => transfer_eval(cfg, dir).map(drop),
        ExperimentKind::RlTrain => rl_train(cfg, dir).map(drop),
        ExperimentKind::RlTransfer => rl_transfer(cfg, dir).map(drop),
    }
}
