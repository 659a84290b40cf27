//! Physical network reconstruction from masks and the prune/fine-tune
//! pipelines.

use chanprune_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::metrics::{l1_scores_all, select_channels, taylor_scores, ChannelScores, Metric, Strategy};
use crate::model::{init_param, TrainedNet};
use crate::netzoo::ParamRole;
use crate::profiles::{compression_of_masks, Compression};
use crate::train::{evaluate, fine_tune, EpochMetrics, TrainConfig};
use crate::{Error, MaskSet, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Copy the surviving slices of every tensor, batchnorm statistics
    /// included.
    #[default]
    Pretrained,
    /// As `Pretrained` but running statistics restart at mean 0, var 1.
    PretrainedResetBn,
    /// Fresh fan-in scaled normal weights.
    Random,
}

/// Removes every masked-out channel from every tensor dimension locked to
/// its flag and returns the smaller network.
pub fn rebuild<S: Scalar>(net: &TrainedNet<S>, masks: &MaskSet, init: InitStrategy, rng: &mut impl Rng) -> Result<TrainedNet<S>> {
    let spec = net.spec();
    masks.check_lengths(spec.flag_lengths())?;
    spec.validate()?;
    let new_spec = spec.with_lengths(&masks.retained_counts())?;
    let params = (0..spec.params().len())
        .map(|i| {
            let role = spec.params()[i].role;
            let fresh = match init {
                InitStrategy::Random => true,
                InitStrategy::PretrainedResetBn => matches!(role, ParamRole::BnMean | ParamRole::BnVar),
                InitStrategy::Pretrained => false,
            };
            if fresh {
                return Ok(init_param(role, &new_spec.param_shape(i), rng));
            }
            let mut t = net.params()[i].clone();
            for dim in 0..t.rank() {
                let view = masks.dim_view(spec, i, dim);
                if view.retained().len() != view.len() {
                    t = t.select(dim, &view.retained())?;
                }
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    TrainedNet::from_parts(new_spec, params)
}

/// Replaces the dense head with a freshly initialized one for a new class
/// count.
pub fn reset_head<S: Scalar>(net: &TrainedNet<S>, num_classes: usize, rng: &mut impl Rng) -> Result<TrainedNet<S>> {
    let spec = net.spec().with_num_classes(num_classes)?;
    let params = (0..spec.params().len())
        .map(|i| {
            let role = spec.params()[i].role;
            if matches!(role, ParamRole::DenseWeight | ParamRole::DenseBias) {
                init_param(role, &spec.param_shape(i), rng)
            } else {
                net.params()[i].clone()
            }
        })
        .collect();
    TrainedNet::from_parts(spec, params)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    OneShot,
    /// Prune flag by flag, front to back, fine-tuning after each stage.
    LayerwiseIterative {
        /// Share of the epoch budget spent after each stage.
        #[serde(default = "default_stage_fraction")]
        stage_fraction: f64,
        /// Recompute data-dependent scores before each stage.
        #[serde(default = "default_true")]
        recompute: bool,
    },
}

fn default_stage_fraction() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl Pipeline {
    pub fn layerwise() -> Self {
        Pipeline::LayerwiseIterative {
            stage_fraction: default_stage_fraction(),
            recompute: true,
        }
    }
}

/// How many channels each flag keeps and how they are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Masks(MaskSet),
    Counts { keep: Vec<usize>, metric: Metric },
}

#[derive(Clone, Debug)]
pub struct PruneJob {
    pub selection: Selection,
    pub init: InitStrategy,
    pub finetune: TrainConfig,
    pub pipeline: Pipeline,
    /// Seed for channel selection and re-initialization.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome<S> {
    pub accuracy: f64,
    pub compression: Compression,
    pub masks: MaskSet,
    pub net: TrainedNet<S>,
    pub history: Vec<EpochMetrics>,
}

fn strategy_for(metric: Metric) -> Strategy {
    match metric {
        Metric::Random => Strategy::Random,
        Metric::L1 | Metric::Taylor => Strategy::TopMetric,
    }
}

fn scores_for<S: Scalar>(net: &TrainedNet<S>, metric: Metric, split: &Split) -> Result<Option<ChannelScores>> {
    Ok(match metric {
        Metric::Random => None,
        Metric::L1 => Some(l1_scores_all(net)?),
        Metric::Taylor => Some(taylor_scores(net, &split.val, crate::train::EVAL_BATCH)?),
    })
}

/// Prunes a copy of `base` per `job`, fine-tunes it and evaluates it on the
/// validation split. Compression is measured against `base`.
pub fn prune_and_finetune<S: Scalar>(base: &TrainedNet<S>, job: &PruneJob, split: &Split) -> Result<PruneOutcome<S>> {
    job.finetune.validate()?;
    let spec = base.spec();
    let lengths = spec.flag_lengths().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut history = Vec::new();

    let (masks, net) = match (&job.pipeline, &job.selection) {
        (Pipeline::OneShot, Selection::Masks(m)) | (Pipeline::LayerwiseIterative { .. }, Selection::Masks(m)) => {
            let mut net = rebuild(base, m, job.init, &mut rng)?;
            history.extend(fine_tune(&mut net, split, &job.finetune, 0)?);
            (m.clone(), net)
        }
        (Pipeline::OneShot, Selection::Counts { keep, metric }) => {
            check_keep(keep, &lengths)?;
            let scores = scores_for(base, *metric, split)?;
            let masks = crate::metrics::select_all(scores.as_ref(), &lengths, keep, strategy_for(*metric), &mut rng)?;
            let mut net = rebuild(base, &masks, job.init, &mut rng)?;
            history.extend(fine_tune(&mut net, split, &job.finetune, 0)?);
            (masks, net)
        }
        (Pipeline::LayerwiseIterative { stage_fraction, recompute }, Selection::Counts { keep, metric }) => {
            check_keep(keep, &lengths)?;
            let total = job.finetune.epochs;
            let stage_epochs = (total as f64 * stage_fraction).round() as usize;
            let mut net = base.clone();
            let mut full: Vec<Vec<bool>> = lengths.iter().map(|&c| vec![true; c]).collect();
            let upfront = if *recompute { None } else { scores_for(base, *metric, split)? };
            for flag in 0..lengths.len() {
                let fresh;
                let scores = if *recompute {
                    fresh = scores_for(&net, *metric, split)?;
                    fresh.as_ref()
                } else {
                    upfront.as_ref()
                };
                // Upfront scores index base channels; after a stage only
                // flags not yet pruned are read, which keep base indexing.
                let s = scores.map(|s| s.scores[flag].as_slice());
                let chosen = select_channels(s, lengths[flag], keep[flag], strategy_for(*metric), &mut rng)?;
                let mut stage = MaskSet::all_ones(net.spec().flag_lengths());
                stage.set_mask(flag, chosen.clone())?;
                full[flag] = chosen;
                net = rebuild(&net, &stage, InitStrategy::Pretrained, &mut rng)?;
                if stage_epochs > 0 {
                    let mut cfg = job.finetune.clone();
                    cfg.epochs = stage_epochs;
                    cfg.decay_epochs = vec![usize::MAX];
                    cfg.seed = job.finetune.seed.wrapping_add(flag as u64 + 1);
                    history.extend(fine_tune(&mut net, split, &cfg, 0)?);
                }
            }
            let masks = MaskSet::new(full)?;
            if job.init != InitStrategy::Pretrained {
                net = rebuild(base, &masks, job.init, &mut rng)?;
            }
            let mut cfg = job.finetune.clone();
            cfg.epochs = total.saturating_sub(stage_epochs * lengths.len());
            if cfg.epochs > 0 {
                history.extend(fine_tune(&mut net, split, &cfg, 0)?);
            }
            (masks, net)
        }
    };
    let compression = compression_of_masks(&masks, spec)?;
    let accuracy = evaluate(&net, &split.val)?;
    Ok(PruneOutcome {
        accuracy,
        compression,
        masks,
        net,
        history,
    })
}

fn check_keep(keep: &[usize], lengths: &[usize]) -> Result<()> {
    if keep.len() != lengths.len() {
        return Err(Error::Config(format!("{} keep counts for {} flags", keep.len(), lengths.len())));
    }
    for (f, (&k, &c)) in keep.iter().zip(lengths).enumerate() {
        if k == 0 || k > c {
            return Err(Error::Config(format!("flag {f}: keep {k} outside [1, {c}]")));
        }
    }
    Ok(())
}
