//! Declarative experiment configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use chanprune_core::data::{load_cifar10, synthetic, Dataset, SyntheticSpec};
use chanprune_core::netzoo::{build, Arch, CNET_DEPTH};
use chanprune_core::pruning::{InitStrategy, Pipeline};
use chanprune_core::rewards::{RewardConfig, RewardKind};
use chanprune_core::{Error, NetworkSpec, Result};
use chanprune_rl::env::ObsMode;
use chanprune_rl::PpoConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    InitSweep,
    MetricSweep,
    ProfileSweep,
    RandomSearch,
    TransferEval,
    RlTrain,
    RlTransfer,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::InitSweep => "init-sweep",
            ExperimentKind::MetricSweep => "metric-sweep",
            ExperimentKind::ProfileSweep => "profile-sweep",
            ExperimentKind::RandomSearch => "random-search",
            ExperimentKind::TransferEval => "transfer-eval",
            ExperimentKind::RlTrain => "rl-train",
            ExperimentKind::RlTransfer => "rl-transfer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    Cnet,
    Resnet20,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: ArchFamily,
    /// Channels per conv for C-NET, base width for ResNet-20.
    pub width: usize,
    /// C-NET conv count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl ArchConfig {
    pub fn arch(&self) -> Arch {
        match self.family {
            ArchFamily::Cnet => Arch::Cnet {
                channels: self.width,
                depth: self.depth.unwrap_or(CNET_DEPTH),
            },
            ArchFamily::Resnet20 => Arch::Resnet20 { width: self.width },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSource {
    pub paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Average-pool factor applied to the 32x32 images.
    #[serde(default = "one")]
    pub downsample: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// One dataset: exactly one of `synthetic` and `cifar10` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar10: Option<CifarSource>,
    /// Seed of the train/val split; defaults to the generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

impl DatasetConfig {
    pub fn synthetic(name: &str, spec: SyntheticSpec) -> Self {
        Self {
            name: Some(name.to_string()),
            synthetic: Some(spec),
            cifar10: None,
            split_seed: None,
        }
    }

    pub fn label(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("d{index}"))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.cifar10) {
            (Some(_), None) => Ok(()),
            (None, Some(c)) => {
                if c.paths.is_empty() {
                    return Err(Error::Config("cifar10 source lists no files".into()));
                }
                for p in &c.paths {
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                Ok(())
            }
            _ => Err(Error::Config("a dataset needs exactly one of `synthetic` or `cifar10`".into())),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        match (&self.synthetic, &self.cifar10) {
            (Some(s), _) => synthetic(s),
            (_, Some(c)) => load_cifar10(&c.paths, c.limit, c.downsample, c.seed),
            _ => unreachable!("validated"),
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or_else(|| match (&self.synthetic, &self.cifar10) {
            (Some(s), _) => s.seed,
            (_, Some(c)) => c.seed,
            _ => 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    #[serde(default = "d_base_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Independently initialized base networks per dataset.
    #[serde(default = "one")]
    pub nets_per_dataset: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_base_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    0.02
}
fn d_batch() -> usize {
    32
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            epochs: d_base_epochs(),
            lr: d_lr(),
            batch_size: d_batch(),
            nets_per_dataset: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "d_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub init: InitStrategy,
    #[serde(default)]
    pub pipeline: Pipeline,
}

fn d_ft_epochs() -> usize {
    5
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: d_ft_epochs(),
            lr: d_lr(),
            batch_size: d_batch(),
            init: InitStrategy::default(),
            pipeline: Pipeline::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "d_profiles")]
    pub profiles: usize,
    #[serde(default = "d_lo")]
    pub lo: f64,
    #[serde(default = "d_hi")]
    pub hi: f64,
    #[serde(default = "d_max_cf")]
    pub max_cf: f64,
    /// Relative half-width of a CF bucket.
    #[serde(default = "d_bucket")]
    pub bucket: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_profiles() -> usize {
    60
}
fn d_lo() -> f64 {
    0.3
}
fn d_hi() -> f64 {
    1.0
}
fn d_max_cf() -> f64 {
    6.0
}
fn d_bucket() -> f64 {
    0.1
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            profiles: d_profiles(),
            lo: d_lo(),
            hi: d_hi(),
            max_cf: d_max_cf(),
            bucket: d_bucket(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Profile JSON files to transfer onto the target.
    #[serde(default)]
    pub profiles: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    #[serde(default = "d_kind")]
    pub kind: RewardKind,
    /// Expected accuracy; each environment's base accuracy when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_e: Option<f64>,
    #[serde(default = "d_c_e")]
    pub c_e: f64,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_threshold")]
    pub accuracy_threshold: f64,
}

fn d_kind() -> RewardKind {
    RewardKind::Gaussian
}
fn d_c_e() -> f64 {
    0.5
}
fn d_sigma() -> f64 {
    0.3
}
fn d_tau() -> f64 {
    0.1
}
fn d_threshold() -> f64 {
    0.9
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            kind: d_kind(),
            a_e: None,
            c_e: d_c_e(),
            sigma: d_sigma(),
            tau: d_tau(),
            accuracy_threshold: d_threshold(),
        }
    }
}

impl RewardSection {
    pub fn resolve(&self, base_accuracy: f64) -> RewardConfig {
        let a_e = self.a_e.unwrap_or(base_accuracy);
        let mut r = match self.kind {
            RewardKind::Gaussian => RewardConfig::gaussian(a_e, self.c_e, self.sigma),
            RewardKind::N2n => RewardConfig::n2n(a_e),
            RewardKind::Hyperbolic => RewardConfig::hyperbolic(a_e, self.c_e, self.tau),
        };
        r.c_e = self.c_e;
        r.sigma = self.sigma;
        r.tau = self.tau;
        r.accuracy_threshold = self.accuracy_threshold;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub reward: RewardSection,
    /// Fine-tune epochs inside each terminal step.
    #[serde(default = "d_env_epochs")]
    pub env_epochs: usize,
    #[serde(default)]
    pub obs_mode: ObsMode,
    #[serde(default = "d_obs_samples")]
    pub obs_samples: usize,
    #[serde(default)]
    pub rollout_seed: u64,
}

fn d_env_epochs() -> usize {
    3
}
fn d_obs_samples() -> usize {
    128
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            reward: RewardSection::default(),
            env_epochs: d_env_epochs(),
            obs_mode: ObsMode::default(),
            obs_samples: d_obs_samples(),
            rollout_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub id: String,
    pub arch: ArchConfig,
    /// Source datasets: searched, swept, or queued for RL.
    pub datasets: Vec<DatasetConfig>,
    /// Held-out dataset for transfer experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DatasetConfig>,
    #[serde(default = "d_val")]
    pub val_fraction: f64,
    /// Repetition seeds for pruning and fine-tuning; base nets stay fixed.
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_cf_grid")]
    pub cf_grid: Vec<f64>,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub rl: RlConfig,
    /// Output root; the run directory is `<out_dir>/<id>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Jobs evaluated concurrently; 0 uses every available thread.
    #[serde(default)]
    pub workers: usize,
}

fn d_val() -> f64 {
    0.25
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_cf_grid() -> Vec<f64> {
    vec![1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0]
}

pub const OUT_ENV: &str = "CHANPRUNE_OUT";

impl ExperimentConfig {
    /// Desk-scale defaults: C-NET-small on one synthetic 8x8 set.
    pub fn desk(kind: ExperimentKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
            arch: ArchConfig {
                family: ArchFamily::Cnet,
                width: 8,
                depth: None,
            },
            datasets: vec![DatasetConfig::synthetic("synthetic", SyntheticSpec::new(4, 512, 7))],
            target: None,
            val_fraction: d_val(),
            seeds: d_seeds(),
            cf_grid: d_cf_grid(),
            base: BaseConfig::default(),
            finetune: FinetuneConfig::default(),
            search: SearchConfig::default(),
            transfer: TransferConfig::default(),
            rl: RlConfig::default(),
            out_dir: None,
            workers: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return bad(format!("experiment id `{}` is not a plain directory name", self.id));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset is required".into());
        }
        for d in self.datasets.iter().chain(&self.target) {
            d.validate()?;
        }
        let mut names: Vec<String> = self.datasets.iter().enumerate().map(|(i, d)| d.label(i)).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("dataset names must be unique".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        if self.base.nets_per_dataset == 0 || self.base.epochs == 0 {
            return bad("base.nets_per_dataset and base.epochs must be positive".into());
        }
        if self.cf_grid.iter().any(|&c| !(c >= 1.0)) {
            return bad("cf_grid entries must be at least 1".into());
        }
        let s = &self.search;
        if !(0.1..=1.0).contains(&s.lo) || !(s.lo..=1.0).contains(&s.hi) || s.hi <= s.lo {
            return bad(format!("search range [{}, {}] must satisfy 0.1 <= lo < hi <= 1", s.lo, s.hi));
        }
        if !(s.max_cf >= 1.0) || !(s.bucket > 0.0 && s.bucket < 1.0) {
            return bad("search.max_cf must be >= 1 and search.bucket in (0, 1)".into());
        }
        for p in &self.transfer.profiles {
            if !p.is_file() {
                return bad(format!("profile file {} does not exist", p.display()));
            }
        }
        if matches!(self.kind, ExperimentKind::TransferEval | ExperimentKind::RlTransfer) && self.target.is_none() {
            return bad(format!("{} needs a `target` dataset", self.kind.name()));
        }
        if self.kind == ExperimentKind::TransferEval && self.transfer.profiles.is_empty() {
            return bad("transfer-eval needs at least one entry in transfer.profiles".into());
        }
        self.rl.ppo.validate()?;
        self.rl.reward.resolve(1.0).validate()?;
        if self.rl.env_epochs == 0 {
            return bad("rl.env_epochs must be positive".into());
        }
        Ok(())
    }

    /// Network spec for a dataset's shape and class count.
    pub fn spec_for(&self, data: &Dataset) -> Result<NetworkSpec> {
        build(self.arch.arch(), data.num_classes, data.shape)
    }

    /// `--out`, then `$CHANPRUNE_OUT`, then `out_dir`, then `runs`.
    pub fn run_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        let root = cli_out
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.id)
    }
}
