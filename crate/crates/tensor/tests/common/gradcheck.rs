//! Central finite-difference oracle for tape gradients.
//!
//! Each case builds `loss = sum(op(inputs) * probe)` for a fixed random
//! probe, then compares every analytic input gradient against
//! `(f(x + h) - f(x - h)) / 2h`.

#![allow(dead_code)]

use chanprune_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    MaxPool,
    Dense,
    Add,
    GlobalAvgPool,
    CrossEntropy,
    ThreeLayerNet,
}

pub const ALL_OPS: [OpKind; 10] = [
    OpKind::Conv,
    OpKind::BatchNormTrain,
    OpKind::BatchNormEval,
    OpKind::Relu,
    OpKind::MaxPool,
    OpKind::Dense,
    OpKind::Add,
    OpKind::GlobalAvgPool,
    OpKind::CrossEntropy,
    OpKind::ThreeLayerNet,
];

/// Builds the scalar loss from leaf tensors; returns (tape, leaf vars, loss).
type Builder = Box<dyn Fn(&[Tensor<f64>]) -> (Tape<f64>, Vec<Var>, Var)>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so relu kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Well-separated distinct values, so max-pool argmax is stable under h.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order
        .iter()
        .map(|&k| k as f64 * 0.1 - n as f64 * 0.05 + rng.random_range(0.0..0.01))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn probe_loss(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Var {
    let p = tape.leaf(probe.clone());
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod).unwrap()
}

fn make_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=3);
    let h = rng.random_range(2..=5);
    let w = rng.random_range(2..=5);
    let c = rng.random_range(1..=3);
    match kind {
        OpKind::Conv => {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let k = k.min(h).min(w);
            let co = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 && rng.random_bool(0.5) { 1 } else { 0 };
            let probe_shape = {
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                vec![n, oh, ow, co]
            };
            let probe = uniform(rng, &probe_shape);
            Case {
                inputs: vec![uniform(rng, &[n, h, w, c]), uniform(rng, &[k, k, c, co])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let wv = t.leaf(ins[1].clone());
                    let y = t.conv2d(x, wv, stride, pad).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x, wv], l)
                }),
            }
        }
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            let n = n.max(2);
            let probe = uniform(rng, &[n, h, w, c]);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let train = kind == OpKind::BatchNormTrain;
            Case {
                inputs: vec![uniform(rng, &[n, h, w, c]), uniform(rng, &[c]), uniform(rng, &[c])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let g = t.leaf(ins[1].clone());
                    let b = t.leaf(ins[2].clone());
                    let y = if train {
                        t.batch_norm_train(x, g, b, 1e-5).unwrap()
                    } else {
                        t.batch_norm_eval(x, g, b, &mean, &var, 1e-5).unwrap()
                    };
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x, g, b], l)
                }),
            }
        }
        OpKind::Relu => {
            let probe = uniform(rng, &[n, h, w, c]);
            Case {
                inputs: vec![off_zero(rng, &[n, h, w, c])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let y = t.relu(x).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x], l)
                }),
            }
        }
        OpKind::MaxPool => {
            let probe = uniform(rng, &[n, h / 2, w / 2, c]);
            Case {
                inputs: vec![distinct(rng, &[n, h, w, c])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let y = t.max_pool(x, 2).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x], l)
                }),
            }
        }
        OpKind::Dense => {
            let f = rng.random_range(1..=6);
            let k = rng.random_range(1..=4);
            let probe = uniform(rng, &[n, k]);
            Case {
                inputs: vec![uniform(rng, &[n, f]), uniform(rng, &[f, k]), uniform(rng, &[k])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let wv = t.leaf(ins[1].clone());
                    let b = t.leaf(ins[2].clone());
                    let y = t.dense(x, wv, Some(b)).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x, wv, b], l)
                }),
            }
        }
        OpKind::Add => {
            let probe = uniform(rng, &[n, h, w, c]);
            Case {
                inputs: vec![uniform(rng, &[n, h, w, c]), uniform(rng, &[n, h, w, c])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let a = t.leaf(ins[0].clone());
                    let b = t.leaf(ins[1].clone());
                    let y = t.add(a, b).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![a, b], l)
                }),
            }
        }
        OpKind::GlobalAvgPool => {
            let probe = uniform(rng, &[n, c]);
            Case {
                inputs: vec![uniform(rng, &[n, h, w, c])],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let y = t.global_avg_pool(x).unwrap();
                    let l = probe_loss(&mut t, y, &probe);
                    (t, vec![x], l)
                }),
            }
        }
        OpKind::CrossEntropy => {
            let k = rng.random_range(2..=5);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            Case {
                inputs: vec![uniform(rng, &[n, k]).map(|v| v * 3.0)],
                build: Box::new(move |ins| {
                    let mut t = Tape::new();
                    let x = t.leaf(ins[0].clone());
                    let l = t.softmax_cross_entropy(x, &labels).unwrap();
                    (t, vec![x], l)
                }),
            }
        }
        OpKind::ThreeLayerNet => three_layer_case(rng),
    }
}

/// conv -> bn -> relu -> maxpool -> conv -> relu -> flatten -> dense -> CE.
/// Inputs are redrawn until no relu pre-activation or max-pool window sits
/// within 1e-3 of a kink, where the derivative is undefined.
fn three_layer_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(2..=3);
    let hw = 4;
    let c0 = rng.random_range(1..=2);
    let c1 = rng.random_range(2..=3);
    let c2 = rng.random_range(2..=3);
    let k = rng.random_range(2..=3);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    loop {
        let inputs = vec![
            uniform(rng, &[n, hw, hw, c0]),
            uniform(rng, &[3, 3, c0, c1]),
            uniform(rng, &[c1]).map(|v| v + 1.5),
            uniform(rng, &[c1]),
            uniform(rng, &[3, 3, c1, c2]),
            uniform(rng, &[(hw / 2) * (hw / 2) * c2, k]),
            uniform(rng, &[k]),
        ];
        let (tape, _, _, probes) = three_layer_net(&inputs, &labels);
        if near_kink(&tape, probes) {
            continue;
        }
        let labels = labels.clone();
        return Case {
            inputs,
            build: Box::new(move |ins| {
                let (t, vars, l, _) = three_layer_net(ins, &labels);
                (t, vars, l)
            }),
        };
    }
}

/// Returns the tape, leaves, loss and (bn output, first relu output,
/// second conv output) for kink screening.
fn three_layer_net(ins: &[Tensor<f64>], labels: &[usize]) -> (Tape<f64>, Vec<Var>, Var, [Var; 3]) {
    let mut t = Tape::new();
    let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
    let h1 = t.conv2d(vars[0], vars[1], 1, 1).unwrap();
    let h1 = t.batch_norm_train(h1, vars[2], vars[3], 1e-5).unwrap();
    let a1 = t.relu(h1).unwrap();
    let p1 = t.max_pool(a1, 2).unwrap();
    let h2 = t.conv2d(p1, vars[4], 1, 1).unwrap();
    let a2 = t.relu(h2).unwrap();
    let f = t.flatten(a2).unwrap();
    let logits = t.dense(f, vars[5], Some(vars[6])).unwrap();
    let l = t.softmax_cross_entropy(logits, labels).unwrap();
    (t, vars, l, [h1, a1, h2])
}

fn near_kink(tape: &Tape<f64>, [pre1, act1, pre2]: [Var; 3]) -> bool {
    let close = |t: &Tensor<f64>| t.data().iter().any(|v| v.abs() < 1e-3);
    if close(tape.value(pre1)) || close(tape.value(pre2)) {
        return true;
    }
    let a1 = tape.value(act1);
    let s = a1.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    for b in 0..n {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for ch in 0..c {
                    let mut vals: Vec<f64> = (0..4)
                        .map(|q| a1.data()[((b * h + 2 * i + q / 2) * w + 2 * j + q % 2) * c + ch])
                        .collect();
                    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
                    if vals[0] > 0.0 && vals[0] - vals[1] < 1e-3 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let (tape, _, loss) = (case.build)(inputs);
    tape.value(loss).data()[0]
}

/// Maximum relative disagreement over every input element of one case.
pub fn max_rel_error(kind: OpKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64) << 32);
    let case = make_case(kind, &mut rng);
    let (tape, vars, loss) = (case.build)(&case.inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[idx].shape()));
        for e in 0..case.inputs[idx].len() {
            let mut plus = case.inputs.clone();
            plus[idx].data_mut()[e] += STEP;
            let mut minus = case.inputs.clone();
            minus[idx].data_mut()[e] -= STEP;
            let numeric = (eval(&case, &plus) - eval(&case, &minus)) / (2.0 * STEP);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
