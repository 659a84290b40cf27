//! Channel scores and the selection rules that decide which channels a
//! layer keeps.

use std::io::Write;

use chanprune_tensor::{Scalar, Tensor};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{Mode, TrainedNet};
use crate::netzoo::FlagId;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Random,
    L1,
    Taylor,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Random => "random",
            Metric::L1 => "l1",
            Metric::Taylor => "taylor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScores {
    pub metric: Metric,
    /// One score vector per flag.
    pub scores: Vec<Vec<f64>>,
}

impl ChannelScores {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["flag", "channel", "score"])?;
        for (f, s) in self.scores.iter().enumerate() {
            for (j, v) in s.iter().enumerate() {
                out.write_record([f.to_string(), j.to_string(), format!("{v:e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Sum of absolute kernel values per output channel of a
/// `kh x kw x c_in x c_out` weight.
pub fn l1_scores<S: Scalar>(weight: &Tensor<S>) -> Result<Vec<f64>> {
    if weight.rank() != 4 {
        return Err(Error::Usage(format!("l1 scores need a rank-4 kernel, got {:?}", weight.shape())));
    }
    let c_out = weight.shape()[3];
    let mut s = vec![0.0; c_out];
    for row in weight.data().chunks_exact(c_out) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v.as_f64().abs();
        }
    }
    Ok(s)
}

/// l1 scores of every flag's owning conv.
pub fn l1_scores_all<S: Scalar>(net: &TrainedNet<S>) -> Result<ChannelScores> {
    let spec = net.spec();
    let scores = spec
        .flags()
        .iter()
        .map(|f| match spec.layers()[f.owner].kind {
            crate::netzoo::LayerKind::Conv { weight, .. } => l1_scores(&net.params()[weight]),
            _ => Err(Error::Usage(format!("flag {} is not owned by a conv", f.name))),
        })
        .collect::<Result<_>>()?;
    Ok(ChannelScores {
        metric: Metric::L1,
        scores,
    })
}

/// How one sample's `g * a` products over a channel's spatial positions
/// are reduced to a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorReduction {
    /// `|mean(g * a)|`: the first-order loss change from zeroing the
    /// whole channel.
    #[default]
    AbsOfMean,
    /// `mean(|g * a|)`: position-wise magnitudes.
    MeanOfAbs,
}

/// First-order Taylor scores per flag with the default reduction.
pub fn taylor_scores<S: Scalar>(net: &TrainedNet<S>, data: &Dataset, batch_size: usize) -> Result<ChannelScores> {
    taylor_scores_with(net, data, batch_size, TaylorReduction::default())
}

/// For each sample, the spatial reduction of `dL_n/da * a` on each channel
/// of the flag's post-activation layers, averaged over samples. `L_n` is
/// the sample's own loss, so the result does not depend on how samples
/// are batched; batchnorm runs in eval mode for the same reason.
pub fn taylor_scores_with<S: Scalar>(
    net: &TrainedNet<S>,
    data: &Dataset,
    batch_size: usize,
    reduction: TaylorReduction,
) -> Result<ChannelScores> {
    let spec = net.spec();
    if data.is_empty() {
        return Err(Error::Config("taylor scores need at least one sample".into()));
    }
    let lengths = spec.flag_lengths();
    let mut acc: Vec<Vec<f64>> = lengths.iter().map(|&c| vec![0.0; c]).collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<S>(chunk)?;
        let pass = net.forward(&x, Some(&y), Mode::Eval)?;
        let grads = pass.backward()?;
        let n = chunk.len() as f64;
        for (f, flag) in spec.flags().iter().enumerate() {
            for &layer in &flag.feature_layers {
                let var = pass.layers[layer];
                let a = pass.tape.value(var);
                let g = grads.get(var).ok_or_else(|| {
                    Error::Usage(format!("no activation gradient for layer `{}`", spec.layers()[layer].name))
                })?;
                accumulate_taylor(a, g, n, reduction, &mut acc[f])?;
            }
        }
    }
    let total = data.len() as f64;
    for s in &mut acc {
        s.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ChannelScores {
        metric: Metric::Taylor,
        scores: acc,
    })
}

/// Adds per-sample spatial reductions of `g * a` into `acc`. `g` is the
/// gradient of the batch-mean loss, hence the factor `batch`.
fn accumulate_taylor<S: Scalar>(
    a: &Tensor<S>,
    g: &Tensor<S>,
    batch: f64,
    reduction: TaylorReduction,
    acc: &mut [f64],
) -> Result<()> {
    let shape = a.shape();
    if shape.len() != 4 || g.shape() != shape || shape[3] != acc.len() {
        return Err(Error::Usage(format!("taylor feature layer has shape {shape:?}")));
    }
    let spatial = shape[1] * shape[2];
    let c = shape[3];
    let scale = batch / spatial as f64;
    let mut sample = vec![0.0; c];
    for (asmp, gsmp) in a.data().chunks_exact(c * spatial).zip(g.data().chunks_exact(c * spatial)) {
        sample.iter_mut().for_each(|v| *v = 0.0);
        for (ar, gr) in asmp.chunks_exact(c).zip(gsmp.chunks_exact(c)) {
            for j in 0..c {
                let p = ar[j].as_f64() * gr[j].as_f64();
                sample[j] += match reduction {
                    TaylorReduction::AbsOfMean => p,
                    TaylorReduction::MeanOfAbs => p.abs(),
                };
            }
        }
        for (dst, v) in acc.iter_mut().zip(&sample) {
            *dst += v.abs() * scale;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Random,
    /// Highest scores win; ties go to the lowest channel index.
    TopMetric,
    /// Highest scores win; ties are broken by a seeded shuffle.
    TopMetricShuffledTies,
}

pub fn select_channels(scores: Option<&[f64]>, c: usize, keep: usize, strategy: Strategy, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if keep == 0 || keep > c {
        return Err(Error::Config(format!("keep count {keep} outside [1, {c}]")));
    }
    let mut mask = vec![false; c];
    if strategy == Strategy::Random {
        for i in sample(rng, c, keep) {
            mask[i] = true;
        }
        return Ok(mask);
    }
    let scores = scores.ok_or_else(|| Error::Usage("top-metric selection needs scores".into()))?;
    if scores.len() != c {
        return Err(Error::Usage(format!("{} scores for {c} channels", scores.len())));
    }
    let mut order: Vec<usize> = (0..c).collect();
    if strategy == Strategy::TopMetricShuffledTies {
        order.shuffle(rng);
    }
    // Stable sort keeps the pre-sort order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Masks for every flag from per-flag keep counts.
pub fn select_all(
    scores: Option<&ChannelScores>,
    lengths: &[usize],
    keep: &[usize],
    strategy: Strategy,
    rng: &mut impl Rng,
) -> Result<crate::MaskSet> {
    let masks = (0..lengths.len())
        .map(|f: FlagId| {
            let s = scores.map(|s| s.scores[f].as_slice());
            select_channels(s, lengths[f], keep[f], strategy, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    crate::MaskSet::new(masks)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da * db).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
