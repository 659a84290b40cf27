use std::fs;
use std::path::Path;

use chanprune_cli::config::{DatasetConfig, ExperimentConfig, ExperimentKind};
use chanprune_cli::pipelines::{self, median, percentile, ProfileStat};
use chanprune_cli::run::{read_results, RESULTS_FILE};
use chanprune_core::data::SyntheticSpec;
use chanprune_core::profiles::{equally_distributed, Profile};
use proptest::prelude::*;

fn tiny(kind: ExperimentKind, id: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(kind, id);
    cfg.datasets = vec![DatasetConfig::synthetic("a", SyntheticSpec::new(4, 256, 7))];
    cfg.base.epochs = 6;
    cfg.finetune.epochs = 1;
    cfg.search.profiles = 4;
    cfg
}

fn results(dir: &Path) -> String {
    fs::read_to_string(dir.join(RESULTS_FILE)).unwrap()
}

#[test]
fn one_profile_gives_one_row_per_base_net() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::RandomSearch, "rs");
    cfg.search.profiles = 1;
    cfg.base.nets_per_dataset = 3;
    let dir = tmp.path().join("rs");
    pipelines::random_search(&cfg, &dir).unwrap();
    let rows = read_results(&dir.join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.iter().filter(|r| r.experiment == "search").count(), 3);
    assert_eq!(rows.iter().filter(|r| r.experiment == "base").count(), 3);
}

#[test]
fn search_respects_cf_cap_and_rows_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::RandomSearch, "rs");
    cfg.search.profiles = 12;
    cfg.search.lo = 0.1;
    cfg.search.max_cf = 3.0;
    cfg.finetune.epochs = 0;
    let dir = tmp.path().join("rs");
    pipelines::random_search(&cfg, &dir).unwrap();
    for r in read_results(&dir.join(RESULTS_FILE)).unwrap() {
        assert!(r.cf <= 3.0 + 1e-12, "{r:?}");
        assert!((r.cf - 1.0 / (1.0 - r.c)).abs() < 1e-9, "{r:?}");
        let p = Profile::load(dir.join(&r.profile)).unwrap();
        assert_eq!(p.len(), 6);
    }
    assert!(dir.join("config.toml").is_file() && dir.join("seeds.json").is_file());
    assert!(dir.join("top.csv").is_file());
}

#[test]
fn rerun_and_resume_reproduce_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::RandomSearch, "rs");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    pipelines::random_search(&cfg, &a).unwrap();
    pipelines::random_search(&cfg, &b).unwrap();
    let full = results(&a);
    assert_eq!(full, results(&b));

    // Drop the last two cells and resume: the missing ones are recomputed
    // and nothing is duplicated.
    let keep: Vec<&str> = full.lines().collect();
    fs::write(b.join(RESULTS_FILE), keep[..keep.len() - 2].join("\n") + "\n").unwrap();
    pipelines::random_search(&cfg, &b).unwrap();
    assert_eq!(full, results(&b));

    // A finished run is a no-op.
    pipelines::random_search(&cfg, &a).unwrap();
    assert_eq!(full, results(&a));
}

#[test]
fn worker_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut one = tiny(ExperimentKind::RandomSearch, "rs");
    one.workers = 1;
    let mut three = one.clone();
    three.workers = 3;
    pipelines::random_search(&one, &tmp.path().join("one")).unwrap();
    pipelines::random_search(&three, &tmp.path().join("three")).unwrap();
    assert_eq!(results(&tmp.path().join("one")), results(&tmp.path().join("three")));
}

fn transfer_cfg(id: &str, profiles: Vec<std::path::PathBuf>) -> ExperimentConfig {
    let mut cfg = tiny(ExperimentKind::TransferEval, id);
    cfg.target = Some(DatasetConfig::synthetic("b", SyntheticSpec::new(4, 256, 8)));
    cfg.transfer.profiles = profiles;
    cfg.search.profiles = 6;
    cfg
}

#[test]
fn own_best_profile_transfers_at_percentile_100() {
    let tmp = tempfile::tempdir().unwrap();
    let ones = tmp.path().join("ones.json");
    equally_distributed("cnet-8", 6, 1.0).unwrap().save(&ones).unwrap();
    let first = tmp.path().join("first");
    let rows = pipelines::transfer_eval(&transfer_cfg("t", vec![ones.clone()]), &first).unwrap();

    // Unpruned transfer sits in the CF 1 bucket close to the base accuracy.
    assert_eq!(rows[0].cf, 1.0);
    let all = read_results(&first.join(RESULTS_FILE)).unwrap();
    let base = all.iter().find(|r| r.experiment == "base" && r.base.starts_with("b-")).unwrap();
    assert!((rows[0].accuracy - base.accuracy).abs() <= 0.1, "{} vs {}", rows[0].accuracy, base.accuracy);

    // The best search profile on the target, transferred back, ties or
    // beats everything in its window.
    let stats = pipelines::profile_stats(&all, "search");
    let best = stats.iter().max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy)).unwrap();
    let own = first.join(&best.profile);
    let rows = pipelines::transfer_eval(&transfer_cfg("t", vec![own]), &tmp.path().join("second")).unwrap();
    assert_eq!(rows[0].accuracy, best.mean_accuracy);
    assert_eq!(rows[0].percentile, Some(100.0));
}

#[test]
fn transfer_rejects_architecture_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("resnet.json");
    equally_distributed("resnet20-4", 13, 0.5).unwrap().save(&p).unwrap();
    assert!(pipelines::transfer_eval(&transfer_cfg("t", vec![p]), &tmp.path().join("x")).is_err());
}

fn curves(kind: ExperimentKind) -> (tempfile::TempDir, Vec<String>) {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(kind, "sweep");
    cfg.cf_grid = vec![1.0, 2.0];
    let labels = pipelines::sweep(&cfg, &tmp.path().join("sweep")).unwrap();
    for l in &labels {
        let text = fs::read_to_string(tmp.path().join(format!("sweep/curves/{l}.csv"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), "target_cf,cf,mean_accuracy,std_accuracy,n");
        assert_eq!(text.lines().count(), 3);
    }
    (tmp, labels)
}

#[test]
fn sweeps_emit_their_curves() {
    assert_eq!(curves(ExperimentKind::MetricSweep).1, ["random", "l1", "taylor"]);
    assert_eq!(curves(ExperimentKind::ProfileSweep).1, ["equal", "increasing", "decreasing", "random"]);
}

#[test]
fn init_sweep_agrees_at_cf_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::InitSweep, "init");
    cfg.cf_grid = vec![1.0];
    cfg.seeds = vec![0, 1, 2];
    cfg.base.epochs = 10;
    cfg.finetune.epochs = 10;
    let dir = tmp.path().join("init");
    assert_eq!(pipelines::sweep(&cfg, &dir).unwrap(), ["pretrained", "random"]);
    let mean = |l: &str| -> f64 {
        let mut rd = csv::Reader::from_path(dir.join(format!("curves/{l}.csv"))).unwrap();
        let rec = rd.records().next().unwrap().unwrap();
        assert_eq!(&rec[1], "1.0");
        rec[2].parse().unwrap()
    };
    let (a, b) = (mean("pretrained"), mean("random"));
    assert!((a - b).abs() < 0.2, "pretrained {a} vs random {b}");
}

#[test]
fn report_groups_by_experiment_and_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::RandomSearch, "rs");
    cfg.seeds = vec![3, 4];
    cfg.search.profiles = 2;
    let dir = tmp.path().join("rs");
    pipelines::random_search(&cfg, &dir).unwrap();
    let summary = pipelines::report(&dir).unwrap();
    let search: Vec<_> = summary.iter().filter(|s| s.experiment == "search").collect();
    assert_eq!(search.len(), 2);
    assert!(search.iter().all(|s| s.n == 2));
    assert!(dir.join("summary.csv").is_file());
}

#[test]
fn rl_train_records_whole_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::RlTrain, "rl");
    cfg.datasets.push(DatasetConfig::synthetic("b", SyntheticSpec::new(4, 256, 8)));
    cfg.rl.ppo.iterations = 2;
    cfg.rl.ppo.episodes_per_iteration = 2;
    cfg.rl.ppo.minibatch = 4;
    cfg.rl.env_epochs = 1;
    let dir = tmp.path().join("rl");
    let out = pipelines::rl_train(&cfg, &dir).unwrap();
    assert_eq!(out.curve.len(), 2);
    let eps = pipelines::read_episodes(&dir.join(pipelines::EPISODES_FILE)).unwrap();
    assert_eq!(eps.len(), 4);
    let ids: Vec<&str> = eps.iter().map(|e| e.env_id.as_str()).collect();
    assert_eq!(ids, ["a-0", "b-0", "a-0", "b-0"]);
    for e in &eps {
        assert_eq!(e.steps.len(), 6);
        assert!(e.steps[..5].iter().all(|s| s.reward == 0.0));
    }
    assert_eq!(out.profile.len(), 6);
    assert!(dir.join("profiles/rl-policy.json").is_file());

    // A second run reuses the stored policy and rollout.
    let again = pipelines::rl_train(&cfg, &dir).unwrap();
    assert_eq!(again.profile, out.profile);
}

fn stat(acc: f64) -> ProfileStat {
    ProfileStat {
        profile: String::new(),
        cf: 2.0,
        mean_accuracy: acc,
        n: 1,
    }
}

proptest! {
    #[test]
    fn median_and_percentile_bounds(v in prop::collection::vec(0.0f64..1.0, 1..40), pick in 0usize..40) {
        let m = median(&v).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
        let stats: Vec<ProfileStat> = v.iter().map(|&a| stat(a)).collect();
        let w: Vec<&ProfileStat> = stats.iter().collect();
        prop_assert_eq!(percentile(&w, hi), Some(100.0));
        let p = percentile(&w, v[pick % v.len()]).unwrap();
        prop_assert!(p > 0.0 && p <= 100.0);
        prop_assert!(percentile(&w, lo - 1.0) == Some(0.0));
    }

    #[test]
    fn window_is_relative(cf in 1.0f64..6.0, other in 1.0f64..6.0) {
        let stats = vec![ProfileStat { cf: other, ..stat(0.5) }];
        let inside = !pipelines::window(&stats, cf, 0.1).is_empty();
        prop_assert_eq!(inside, (other - cf).abs() <= 0.1 * cf + 1e-12);
    }
}
