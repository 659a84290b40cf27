use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanprune_cli::config::{ArchFamily, ExperimentConfig, ExperimentKind};
use chanprune_cli::pipelines::{self, SweepFamily};
use chanprune_core::profiles::{equally_distributed, Profile};
use chanprune_core::rewards::{emit_landscape, RewardConfig};
use chanprune_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chanprune", version, about = "Layer-wise channel pruning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train (or reload) the base networks of every configured dataset.
    TrainBase(Common),
    /// Prune the base networks with given profiles and fine-tune.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Profile JSON files.
        #[arg(long = "profile")]
        profiles: Vec<PathBuf>,
        /// Equally distributed profile with this retention fraction.
        #[arg(long)]
        equal: Option<f64>,
        /// Equally distributed profile solved for this compression factor.
        #[arg(long)]
        cf: Option<f64>,
    },
    /// Seeded random profile search.
    RandomSearch(Common),
    /// Transfer profiles to the target dataset and rank them.
    TransferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "profile")]
        profiles: Vec<PathBuf>,
    },
    /// Train a layer-wise PPO policy over the source base networks.
    RlTrain(Common),
    /// rl-train followed by transfer of the rolled-out profile.
    RlTransfer(Common),
    /// Roll a saved policy out into a profile.
    RlRollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Sample actions instead of taking the mean.
        #[arg(long)]
        stochastic: bool,
    },
    /// One of the init, metric or profile sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: SweepKind,
    },
    /// Run whatever experiment kind the config names.
    Run(Common),
    /// Write a reward landscape grid as CSV.
    EmitLandscape {
        #[arg(long, value_enum, default_value = "gaussian")]
        reward: RewardArg,
        #[arg(long, default_value_t = 1.0)]
        a_e: f64,
        #[arg(long, default_value_t = 0.5)]
        c_e: f64,
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        #[arg(long, default_value = "landscapes")]
        out: PathBuf,
    },
    /// Summarize a run directory into summary.csv.
    Report {
        /// Run directory (the one holding results.csv).
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Init,
    Metric,
    Profile,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Gaussian,
    N2n,
    Hyperbolic,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (beats $CHANPRUNE_OUT and the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    /// Comma-separated repetition seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    arch: Option<ArchFamily>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    base_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Number of random-search profiles.
    #[arg(long)]
    search_profiles: Option<usize>,
    #[arg(long)]
    max_cf: Option<f64>,
    /// Reward target compression for RL.
    #[arg(long)]
    c_e: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    /// `kind` of `None` keeps whatever the config file says.
    fn resolve(&self, kind: Option<ExperimentKind>, default_id: &str) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(kind.unwrap_or(ExperimentKind::RandomSearch), default_id),
        };
        if let Some(k) = kind {
            cfg.kind = k;
        }
        if let Some(id) = &self.id {
            cfg.id = id.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(a) = self.arch {
            cfg.arch.family = a;
        }
        if let Some(w) = self.width {
            cfg.arch.width = w;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(e) = self.base_epochs {
            cfg.base.epochs = e;
        }
        if let Some(e) = self.finetune_epochs {
            cfg.finetune.epochs = e;
        }
        if let Some(n) = self.search_profiles {
            cfg.search.profiles = n;
        }
        if let Some(m) = self.max_cf {
            cfg.search.max_cf = m;
        }
        if let Some(c) = self.c_e {
            cfg.rl.reward.c_e = c;
        }
        if let Some(i) = self.iterations {
            cfg.rl.ppo.iterations = i;
        }
        let dir = cfg.run_dir(self.out.as_deref());
        Ok((cfg, dir))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if matches!(e, Error::Config(_)) {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn done(dir: &Path) {
    println!("run directory: {}", dir.display());
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainBase(c) => {
            let (cfg, dir) = c.resolve(None, "bases")?;
            for b in pipelines::train_base(&cfg, &dir)? {
                println!("{}\tseed {}\taccuracy {:.4}", b.id, b.seed, b.accuracy);
            }
            done(&dir);
        }
        Cmd::Prune {
            common,
            profiles,
            equal,
            cf,
        } => {
            let (cfg, dir) = common.resolve(None, "prune")?;
            let mut list = profiles.iter().map(|p| load_profile(p)).collect::<Result<Vec<_>>>()?;
            let spec = cfg.spec_for(&cfg.datasets[0].load()?)?;
            if let Some(k) = equal {
                list.push(equally_distributed(&spec.arch_name(), spec.flag_count(), k)?);
            }
            if let Some(t) = cf {
                list.push(pipelines::profile_for_cf(&spec, SweepFamily::Equal, t, &[], 0)?);
            }
            if list.is_empty() {
                return Err(Error::Config("prune needs --profile, --equal or --cf".into()));
            }
            for r in pipelines::prune(&cfg, &dir, &list)? {
                println!("{}\t{}\tseed {}\tcf {:.3}\taccuracy {:.4}", r.profile, r.base, r.seed, r.cf, r.accuracy);
            }
            done(&dir);
        }
        Cmd::RandomSearch(c) => {
            let (cfg, dir) = c.resolve(Some(ExperimentKind::RandomSearch), "random-search")?;
            let stats = pipelines::random_search(&cfg, &dir)?;
            println!("{} profiles evaluated", stats.len());
            done(&dir);
        }
        Cmd::TransferEval { common, profiles } => {
            let (mut cfg, dir) = common.resolve(Some(ExperimentKind::TransferEval), "transfer-eval")?;
            cfg.transfer.profiles.extend(profiles);
            for r in pipelines::transfer_eval(&cfg, &dir)? {
                print_transfer(&r);
            }
            done(&dir);
        }
        Cmd::RlTrain(c) => {
            let (cfg, dir) = c.resolve(Some(ExperimentKind::RlTrain), "rl-train")?;
            let out = pipelines::rl_train(&cfg, &dir)?;
            if let Some(last) = out.curve.last() {
                println!("final mean reward {:.4}", last.mean_reward);
            }
            println!("profile {} betas {:?}", out.profile_ref, out.profile.betas);
            done(&dir);
        }
        Cmd::RlTransfer(c) => {
            let (cfg, dir) = c.resolve(Some(ExperimentKind::RlTransfer), "rl-transfer")?;
            let (out, rows) = pipelines::rl_transfer(&cfg, &dir)?;
            println!("profile {} betas {:?}", out.profile_ref, out.profile.betas);
            rows.iter().for_each(print_transfer);
            done(&dir);
        }
        Cmd::RlRollout {
            common,
            policy,
            stochastic,
        } => {
            let (cfg, dir) = common.resolve(Some(ExperimentKind::RlTrain), "rl-rollout")?;
            let (p, rel) = pipelines::rl_rollout(&cfg, &dir, &policy, !stochastic)?;
            println!("profile {rel} betas {:?}", p.betas);
            done(&dir);
        }
        Cmd::Sweep { common, kind } => {
            let kind = match kind {
                SweepKind::Init => ExperimentKind::InitSweep,
                SweepKind::Metric => ExperimentKind::MetricSweep,
                SweepKind::Profile => ExperimentKind::ProfileSweep,
            };
            let (cfg, dir) = common.resolve(Some(kind), kind.name())?;
            for label in pipelines::sweep(&cfg, &dir)? {
                println!("curves/{label}.csv");
            }
            done(&dir);
        }
        Cmd::Run(c) => {
            if c.config.is_none() {
                return Err(Error::Config("run needs --config".into()));
            }
            let (cfg, dir) = c.resolve(None, "run")?;
            pipelines::run_experiment(&cfg, &dir)?;
            done(&dir);
        }
        Cmd::EmitLandscape {
            reward,
            a_e,
            c_e,
            sigma,
            tau,
            resolution,
            out,
        } => {
            let cfg = match reward {
                RewardArg::Gaussian => RewardConfig::gaussian(a_e, c_e, sigma),
                RewardArg::N2n => RewardConfig::n2n(a_e),
                RewardArg::Hyperbolic => RewardConfig::hyperbolic(a_e, c_e, tau),
            };
            cfg.validate()?;
            if resolution < 2 {
                return Err(Error::Config("resolution must be at least 2".into()));
            }
            println!("{}", emit_landscape(&cfg, resolution, &out)?.display());
        }
        Cmd::Report { dir } => {
            for r in pipelines::report(&dir)? {
                println!(
                    "{}\t{}\tcf {:.3}\tmean {:.4}\tstd {:.4}\tn {}",
                    r.experiment, r.profile, r.cf, r.mean_accuracy, r.std_accuracy, r.n
                );
            }
        }
    }
    Ok(())
}

fn load_profile(path: &Path) -> Result<Profile> {
    match Profile::load(path) {
        Err(Error::Io(e)) => Err(Error::Config(format!("{}: {e}", path.display()))),
        other => other,
    }
}

fn print_transfer(r: &pipelines::TransferRow) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{}\tcf {:.3}\taccuracy {:.4}\tbucket n {}\tmedian {}\tpercentile {}",
        r.profile,
        r.cf,
        r.accuracy,
        r.bucket_n,
        fmt(r.bucket_median),
        r.percentile.map_or("-".to_string(), |x| format!("{x:.1}"))
    );
}
