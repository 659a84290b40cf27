//! Concrete networks: a [`NetworkSpec`] plus weight tensors, with forward
//! evaluation on a [`Tape`].

use chanprune_tensor::checkpoint::Checkpoint;
use chanprune_tensor::{Grads, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::netzoo::{CountPolicy, LayerKind, NetworkSpec, ParamRole};
use crate::{Error, Profile, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedNet<S> {
    spec: NetworkSpec,
    params: Vec<Tensor<S>>,
}

/// A recorded forward evaluation.
pub struct ForwardPass<S> {
    pub tape: Tape<S>,
    /// Leaf variable per trainable parameter.
    pub params: Vec<Option<Var>>,
    /// Output variable per layer.
    pub layers: Vec<Var>,
    pub logits: Var,
    pub loss: Option<Var>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.tape.value(l).data()[0].as_f64())
    }

    pub fn backward(&self) -> Result<Grads<S>> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Usage("forward pass recorded without labels".into()))?;
        Ok(self.tape.backward(loss)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: NetworkSpec,
    #[serde(default)]
    profile: Option<Profile>,
}

/// Fan-in scaled normal: `N(0, 2 / fan_in)`.
pub fn he_normal<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn init_param<S: Scalar>(role: ParamRole, shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    match role {
        ParamRole::ConvWeight => he_normal(shape, shape[0] * shape[1] * shape[2], rng),
        ParamRole::DenseWeight => he_normal(shape, shape[0], rng),
        ParamRole::BnGamma | ParamRole::BnVar => Tensor::full(shape, S::one()),
        ParamRole::BnBeta | ParamRole::BnMean | ParamRole::DenseBias => Tensor::zeros(shape),
    }
}

impl<S: Scalar> TrainedNet<S> {
    /// Fresh network with fan-in scaled normal weights.
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Self {
        let params = (0..spec.params().len())
            .map(|i| init_param(spec.params()[i].role, &spec.param_shape(i), rng))
            .collect();
        Self { spec, params }
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor<S>>) -> Result<Self> {
        if params.len() != spec.params().len() {
            return Err(Error::Config(format!(
                "{} tensors for {} parameters",
                params.len(),
                spec.params().len()
            )));
        }
        for (i, t) in params.iter().enumerate() {
            let want = spec.param_shape(i);
            if t.shape() != want.as_slice() {
                return Err(Error::Layer {
                    layer: spec.params()[i].name.clone(),
                    source: chanprune_tensor::Error::shape("parameter", &want, t.shape()),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.spec.param_index(name).map(|i| &self.params[i])
    }

    pub fn into_parts(self) -> (NetworkSpec, Vec<Tensor<S>>) {
        (self.spec, self.params)
    }

    /// Number of stored scalars counted under `policy`.
    pub fn stored_param_count(&self, policy: CountPolicy) -> u64 {
        self.spec
            .params()
            .iter()
            .zip(&self.params)
            .filter(|(d, _)| policy == CountPolicy::All || !d.role.is_batchnorm())
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> TrainedNet<T> {
        TrainedNet {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Runs the network on an NHWC batch. With labels the pass also records
    /// the mean softmax cross-entropy.
    pub fn forward(&self, x: &Tensor<S>, labels: Option<&[usize]>, mode: Mode) -> Result<ForwardPass<S>> {
        let input = self.spec.input();
        let want = [x.shape()[0], input.height, input.width, input.channels];
        if x.shape() != want {
            return Err(Error::Layer {
                layer: "input".into(),
                source: chanprune_tensor::Error::shape("input batch", &want, x.shape()),
            });
        }
        let mut tape = Tape::new();
        let params: Vec<Option<Var>> = self
            .spec
            .params()
            .iter()
            .zip(&self.params)
            .map(|(d, t)| d.role.trainable().then(|| tape.leaf(t.clone())))
            .collect();
        let p = |i: usize| params[i].expect("trainable parameter");
        let mut layers: Vec<Var> = Vec::with_capacity(self.spec.layers().len());
        for layer in self.spec.layers() {
            let arg = |k: usize| layers[layer.inputs[k]];
            let out = match layer.kind {
                LayerKind::Input => Ok(tape.leaf(x.clone())),
                LayerKind::Conv { weight, stride, pad } => tape.conv2d(arg(0), p(weight), stride, pad),
                LayerKind::BatchNorm { gamma, beta, mean, var } => match mode {
                    Mode::Train => tape.batch_norm_train(arg(0), p(gamma), p(beta), BN_EPS),
                    Mode::Eval => tape.batch_norm_eval(
                        arg(0),
                        p(gamma),
                        p(beta),
                        self.params[mean].data(),
                        self.params[var].data(),
                        BN_EPS,
                    ),
                },
                LayerKind::Relu => tape.relu(arg(0)),
                LayerKind::MaxPool { size } => tape.max_pool(arg(0), size),
                LayerKind::GlobalAvgPool => tape.global_avg_pool(arg(0)),
                LayerKind::Flatten => tape.flatten(arg(0)),
                LayerKind::Dense { weight, bias } => tape.dense(arg(0), p(weight), Some(p(bias))),
                LayerKind::Add => tape.add(arg(0), arg(1)),
            };
            let out = out.map_err(|source| Error::Layer {
                layer: layer.name.clone(),
                source,
            })?;
            layers.push(out);
        }
        let logits = *layers.last().expect("network has layers");
        let loss = match labels {
            Some(labels) => Some(tape.softmax_cross_entropy(logits, labels).map_err(|source| Error::Layer {
                layer: "loss".into(),
                source,
            })?),
            None => None,
        };
        Ok(ForwardPass {
            tape,
            params,
            layers,
            logits,
            loss,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let pass = self.forward(x, None, Mode::Eval)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance).
    pub fn update_running_stats(&mut self, pass: &ForwardPass<S>) {
        let m = S::lit(BN_MOMENTUM);
        let one_m = S::lit(1.0 - BN_MOMENTUM);
        for (li, layer) in self.spec.layers().iter().enumerate() {
            if let LayerKind::BatchNorm { mean, var, .. } = layer.kind {
                let Some((bm, bv)) = pass.tape.batch_stats(pass.layers[li]) else {
                    continue;
                };
                let shape = pass.tape.value(pass.layers[li]).shape();
                let n = shape[0] * shape[1] * shape[2];
                let unbias = if n > 1 { S::lit(n as f64 / (n - 1) as f64) } else { S::one() };
                for (r, &b) in self.params[mean].data_mut().iter_mut().zip(bm) {
                    *r = m * *r + one_m * b;
                }
                for (r, &b) in self.params[var].data_mut().iter_mut().zip(bv) {
                    *r = m * *r + one_m * b * unbias;
                }
            }
        }
    }

    pub fn to_checkpoint(&self, profile: Option<&Profile>) -> Result<Checkpoint<S>> {
        let meta = serde_json::to_string(&Metadata {
            spec: self.spec.clone(),
            profile: profile.cloned(),
        })?;
        let mut ckpt = Checkpoint::new(meta);
        for (d, t) in self.spec.params().iter().zip(&self.params) {
            ckpt.push(d.name.clone(), t.clone());
        }
        Ok(ckpt)
    }

    /// Restores a network and the profile it was pruned with, if any.
    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<(Self, Option<Profile>)> {
        let meta: Metadata = serde_json::from_str(&ckpt.metadata)?;
        let params = meta
            .spec
            .params()
            .iter()
            .map(|d| {
                ckpt.get(&d.name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{}`", d.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Self::from_parts(meta.spec, params)?, meta.profile))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, profile: Option<&Profile>) -> Result<()> {
        Ok(self.to_checkpoint(profile)?.save(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, Option<Profile>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
