//! Independent reference implementations used to check the library.

use chanprune_core::model::{Mode, TrainedNet, BN_EPS};
use chanprune_core::netzoo::{Arch, LayerKind, NetworkSpec};
use chanprune_core::MaskSet;
use chanprune_tensor::{Tape, Tensor, Var};

/// Parameter count (conv kernels + dense weights and biases) walked from
/// the architecture definition, given the retained channels per flag.
pub fn brute_force_count(arch: Arch, input: (usize, usize, usize), classes: usize, kept: &[usize]) -> u64 {
    let (h, w, c_in) = input;
    let k = |i: usize| kept[i] as u64;
    match arch {
        Arch::Cnet { depth, .. } => {
            assert_eq!(kept.len(), depth);
            let mut total = 0u64;
            let mut prev = c_in as u64;
            let (mut hh, mut ww) = (h, w);
            for i in 0..depth {
                total += 9 * prev * k(i);
                prev = k(i);
                if (i + 1) % 2 == 0 && i + 1 < depth {
                    hh /= 2;
                    ww /= 2;
                }
            }
            total + (hh * ww) as u64 * prev * classes as u64 + classes as u64
        }
        Arch::Resnet20 { .. } => {
            assert_eq!(kept.len(), 13);
            let mut total = 9 * c_in as u64 * k(0);
            let mut stream = k(0);
            for b in 0..3 {
                let base = 1 + 4 * b;
                let (m0, out, m1, m2) = (k(base), k(base + 1), k(base + 2), k(base + 3));
                total += 9 * stream * m0 + 9 * m0 * out + stream * out;
                total += 9 * out * m1 + 9 * m1 * out;
                total += 9 * out * m2 + 9 * m2 * out;
                stream = out;
            }
            total + stream * classes as u64 + classes as u64
        }
    }
}

fn channel_mask(tape: &mut Tape<f64>, shape: &[usize], mask: &[bool]) -> Var {
    let c = *shape.last().unwrap();
    assert_eq!(c, mask.len());
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| if mask[i % c] { 1.0 } else { 0.0 }).collect();
    tape.leaf(Tensor::new(shape, data).unwrap())
}

/// Eval-mode logits of the full-size network with every flagged activation
/// multiplied by its channel mask after each conv, batchnorm and add.
pub fn masked_forward(net: &TrainedNet<f64>, masks: &MaskSet, x: &Tensor<f64>) -> Tensor<f64> {
    let spec: &NetworkSpec = net.spec();
    let p = net.params();
    let mut tape = Tape::new();
    let mut outs: Vec<Var> = Vec::new();
    for layer in spec.layers() {
        let a = |k: usize| outs[layer.inputs[k]];
        let v = match layer.kind {
            LayerKind::Input => tape.leaf(x.clone()),
            LayerKind::Conv { weight, stride, pad } => {
                let w = tape.leaf(p[weight].clone());
                tape.conv2d(a(0), w, stride, pad).unwrap()
            }
            LayerKind::BatchNorm { gamma, beta, mean, var } => {
                let g = tape.leaf(p[gamma].clone());
                let b = tape.leaf(p[beta].clone());
                tape.batch_norm_eval(a(0), g, b, p[mean].data(), p[var].data(), BN_EPS).unwrap()
            }
            LayerKind::Relu => tape.relu(a(0)).unwrap(),
            LayerKind::MaxPool { size } => tape.max_pool(a(0), size).unwrap(),
            LayerKind::GlobalAvgPool => tape.global_avg_pool(a(0)).unwrap(),
            LayerKind::Flatten => tape.flatten(a(0)).unwrap(),
            LayerKind::Dense { weight, bias } => {
                let w = tape.leaf(p[weight].clone());
                let b = tape.leaf(p[bias].clone());
                tape.dense(a(0), w, Some(b)).unwrap()
            }
            LayerKind::Add => tape.add(a(0), a(1)).unwrap(),
        };
        let masked = matches!(layer.kind, LayerKind::Conv { .. } | LayerKind::BatchNorm { .. } | LayerKind::Add);
        let v = match (masked, layer.channel_flag) {
            (true, Some(f)) => {
                let shape = tape.value(v).shape().to_vec();
                let m = channel_mask(&mut tape, &shape, masks.mask(f));
                tape.mul(v, m).unwrap()
            }
            _ => v,
        };
        outs.push(v);
    }
    tape.value(*outs.last().unwrap()).clone()
}

/// Mean eval loss and per-sample losses with one channel of one flag
/// zeroed after its producing layers.
pub fn per_sample_losses(net: &TrainedNet<f64>, masks: &MaskSet, x: &Tensor<f64>, labels: &[usize]) -> Vec<f64> {
    let logits = masked_forward(net, masks, x);
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

pub fn eval_logits(net: &TrainedNet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let pass = net.forward(x, None, Mode::Eval).unwrap();
    pass.tape.value(pass.logits).clone()
}
