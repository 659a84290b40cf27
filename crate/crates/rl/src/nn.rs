//! Small dense networks with hand-written backpropagation and Adam.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// Per layer: weights `in x out` row-major, then biases.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub sizes: Vec<usize>,
}

/// Activations kept for backpropagation: input, then each layer output.
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    batch: usize,
}

impl Mlp {
    /// Orthogonal-free scaled normal init; the output layer is scaled by
    /// `out_scale`.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut std = (1.0 / n_in as f64).sqrt();
            if i + 2 == sizes.len() {
                std *= out_scale;
            }
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..n_in * n_out).map(|_| normal.sample(rng)).collect();
            layers.push((weights, vec![0.0; n_out]));
        }
        Self {
            layers,
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Forward over a row-major batch.
    pub fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpCache) {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.sizes[li], self.sizes[li + 1]);
            let input = &acts[li];
            let mut out = vec![0.0; batch * n_out];
            for r in 0..batch {
                let row = &input[r * n_in..(r + 1) * n_in];
                let o = &mut out[r * n_out..(r + 1) * n_out];
                o.copy_from_slice(b);
                for (i, &xi) in row.iter().enumerate() {
                    let wr = &w[i * n_out..(i + 1) * n_out];
                    for (ov, &wv) in o.iter_mut().zip(wr) {
                        *ov += xi * wv;
                    }
                }
                if li != last {
                    o.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            acts.push(out);
        }
        let y = acts.last().expect("output").clone();
        (y, MlpCache { acts, batch })
    }

    /// Gradients (same layout as `layers`) for upstream gradient `dy`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let batch = cache.batch;
        let last = self.layers.len() - 1;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.layers.iter().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])).collect();
        let mut delta = dy.to_vec();
        for li in (0..self.layers.len()).rev() {
            let (n_in, n_out) = (self.sizes[li], self.sizes[li + 1]);
            if li != last {
                // d tanh = 1 - y^2 on this layer's output.
                for (d, &y) in delta.iter_mut().zip(&cache.acts[li + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &cache.acts[li];
            let (gw, gb) = &mut grads[li];
            let w = &self.layers[li].0;
            let mut next = vec![0.0; batch * n_in];
            for r in 0..batch {
                let d = &delta[r * n_out..(r + 1) * n_out];
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for i in 0..n_in {
                    let xi = input[r * n_in + i];
                    let wr = &w[i * n_out..(i + 1) * n_out];
                    let gr = &mut gw[i * n_out..(i + 1) * n_out];
                    let mut acc = 0.0;
                    for j in 0..n_out {
                        gr[j] += xi * d[j];
                        acc += wr[j] * d[j];
                    }
                    next[r * n_in + i] = acc;
                }
            }
            delta = next;
        }
        grads
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut k = 0;
        for (w, b) in &mut self.layers {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = v[k];
                k += 1;
            }
        }
    }
}

pub fn flatten_grads(g: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    g.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// In-place descent step on `params` with gradient `g`.
    pub fn step(&mut self, params: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Running per-dimension mean and variance (parallel Welford merge).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn update(&mut self, rows: &[f64], dim: usize) {
        let n = (rows.len() / dim) as f64;
        if n == 0.0 {
            return;
        }
        for j in 0..dim {
            let col = rows.iter().skip(j).step_by(dim);
            let m = col.clone().sum::<f64>() / n;
            let v = col.map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let delta = m - self.mean[j];
            let tot = self.count + n;
            let new_mean = self.mean[j] + delta * n / tot;
            let m2 = self.var[j] * self.count + v * n + delta * delta * self.count * n / tot;
            self.mean[j] = new_mean;
            self.var[j] = m2 / tot;
        }
        self.count += n;
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % self.mean.len();
                ((v - self.mean[j]) / (self.var[j] + 1e-8).sqrt()).clamp(-10.0, 10.0)
            })
            .collect()
    }
}
