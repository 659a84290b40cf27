use crate::{matmul, Error, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Usage(format!(
                "conv2d expects rank-4 input and kernel, got {x:?} and {w:?}"
            )));
        }
        if x[3] != w[2] {
            return Err(Error::shape("conv2d input channels", &[w[2]], &[x[3]]));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be positive".into()));
        }
        let (h, wd) = (x[1] + 2 * pad, x[2] + 2 * pad);
        if h < w[0] || wd < w[1] {
            return Err(Error::shape("conv2d spatial extent", &w[..2], &x[1..3]));
        }
        Ok(Self {
            batch: x[0],
            in_h: x[1],
            in_w: x[2],
            in_c: x[3],
            k_h: w[0],
            k_w: w[1],
            out_c: w[3],
            out_h: (h - w[0]) / stride + 1,
            out_w: (wd - w[1]) / stride + 1,
            stride,
            pad,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let patch = self.patch();
        let mut cols = vec![S::zero(); self.rows() * patch];
        let c = self.in_c;
        for n in 0..self.batch {
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let row = (n * self.out_h + oh) * self.out_w + ow;
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for kh in 0..self.k_h {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        for kw in 0..self.k_w {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            if iw < 0 || iw >= self.in_w as isize {
                                continue;
                            }
                            let src = ((n * self.in_h + ih as usize) * self.in_w + iw as usize) * c;
                            let off = (kh * self.k_w + kw) * c;
                            dst[off..off + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let patch = self.patch();
        let c = self.in_c;
        for n in 0..self.batch {
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let row = (n * self.out_h + oh) * self.out_w + ow;
                    let src_row = &cols[row * patch..(row + 1) * patch];
                    for kh in 0..self.k_h {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        for kw in 0..self.k_w {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            if iw < 0 || iw >= self.in_w as isize {
                                continue;
                            }
                            let dst = ((n * self.in_h + ih as usize) * self.in_w + iw as usize) * c;
                            let off = (kh * self.k_w + kw) * c;
                            for (d, &s) in dx[dst..dst + c].iter_mut().zip(&src_row[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        mean: Vec<S>,
        var: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Eagerly evaluated record of primitive operations, in creation order.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one root value with respect to every recorded value.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn channels_of(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("variable {} is not on this tape", var.0)))
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Batch mean and biased variance recorded by a train-mode batchnorm.
    pub fn batch_stats(&self, var: Var) -> Option<(&[S], &[S])> {
        match &self.nodes.get(var.0)?.op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let cols = geom.im2col(self.value(x).data());
        let mut out = vec![S::zero(); geom.rows() * geom.out_c];
        matmul(
            geom.rows(),
            geom.patch(),
            geom.out_c,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            S::zero(),
        );
        let value = Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.out_c], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }))
    }

    fn check_channel_params(&self, x: Var, params: &[Var], context: &str) -> Result<usize> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::Usage(format!("{context} expects NHWC input, got {shape:?}")));
        }
        let c = channels_of(shape);
        for &p in params {
            self.check(p)?;
            if self.value(p).shape() != [c] {
                return Err(Error::shape(context, &[c], self.value(p).shape()));
            }
        }
        Ok(c)
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let c = self.check_channel_params(x, &[gamma, beta], "batchnorm")?;
        let xs = self.value(x).data();
        let rows = xs.len() / c;
        let inv_rows = S::lit(1.0 / rows as f64);
        let mut mean = vec![S::zero(); c];
        for row in xs.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_rows);
        let mut var = vec![S::zero(); c];
        for row in xs.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_rows);
        let eps = S::lit(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Batchnorm with frozen statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        self.check(x)?;
        let c = self.check_channel_params(x, &[gamma, beta], "batchnorm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm running statistics",
                &[c],
                &[running_mean.len().min(running_var.len())],
            ));
        }
        let eps = S::lit(eps);
        let inv_std: Vec<S> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| {
                (0..c).map(|j| (row[j] - running_mean[j]) * inv_std[j] * g[j] + b[j]).collect::<Vec<_>>()
            })
            .collect();
        let value = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Non-overlapping `size x size` max pooling; trailing rows/columns that
    /// do not fill a window are dropped. Ties resolve to the first element.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || size == 0 || shape[1] < size || shape[2] < size {
            return Err(Error::Usage(format!("max_pool({size}) on shape {shape:?}")));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / size, w / size);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + i * size) * w + j * size) * c + ch;
                        let mut best = xs[best_idx];
                        for di in 0..size {
                            for dj in 0..size {
                                let idx = ((b * h + i * size + di) * w + j * size + dj) * c + ch;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, oh, ow, c], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Usage(format!("global_avg_pool on shape {shape:?}")));
        }
        let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        let scale = S::lit(1.0 / hw as f64);
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); n * c];
        for b in 0..n {
            for row in xs[b * hw * c..(b + 1) * hw * c].chunks_exact(c) {
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }

    /// Row-major flatten to `batch x features`: the channel index varies
    /// fastest, then width, then height.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = self.value(x).len() / n;
        let value = self.value(x).clone().reshape(&[n, rest])?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", ws, xs));
        }
        let (n, f, k) = (xs[0], ws[0], ws[1]);
        let mut out = vec![S::zero(); n * k];
        if let Some(b) = b {
            self.check(b)?;
            let bias = self.value(b);
            if bias.shape() != [k] {
                return Err(Error::shape("dense bias", &[k], bias.shape()));
            }
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(bias.data());
            }
        }
        matmul(n, f, k, self.value(x).data(), false, self.value(w).data(), false, &mut out, S::one());
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "elementwise add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "elementwise mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.value(logits).shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("softmax cross-entropy", &[labels.len()], shape));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(labels.len() * k);
        let mut loss = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: S = exps.iter().copied().sum();
            loss += (z.ln() - (row[label] - max)).as_f64();
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = loss / labels.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax cross-entropy loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(S::lit(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar root seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a value that was never produced by a forward pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Usage("backward root must be a scalar".into()));
        }
        self.backward_with_seed(root, Tensor::scalar(S::one()))
    }

    pub fn backward_with_seed(&self, root: Var, seed: Tensor<S>) -> Result<Grads<S>> {
        self.check(root).map_err(|_| {
            Error::Usage("backward called on a value that was never produced by a forward pass".into())
        })?;
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape("backward seed", self.value(root).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, cols } => {
                let (m, k, n) = (geom.rows(), geom.patch(), geom.out_c);
                let mut dw = vec![S::zero(); k * n];
                matmul(k, m, n, cols, true, gd, false, &mut dw, S::zero());
                accumulate(grads, *w, self.value(*w).shape(), dw);
                let mut dcols = vec![S::zero(); m * k];
                matmul(m, n, k, gd, false, self.value(*w).data(), true, &mut dcols, S::zero());
                let mut dx = vec![S::zero(); self.value(*x).len()];
                geom.col2im(&dcols, &mut dx);
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = inv_std.len();
                let rows = gd.len() / c;
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for (drow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] += drow[j];
                        sum_dy_xhat[j] += drow[j] * hrow[j];
                    }
                }
                let gm = self.value(*gamma).data();
                let r = S::lit(rows as f64);
                let mut dx = Vec::with_capacity(gd.len());
                for (drow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        let scale = gm[j] * inv_std[j] / r;
                        dx.push(scale * (r * drow[j] - sum_dy[j] - hrow[j] * sum_dy_xhat[j]));
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
                accumulate(grads, *gamma, &[c], sum_dy_xhat);
                accumulate(grads, *beta, &[c], sum_dy);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let gm = self.value(*gamma).data();
                let xs = self.value(*x).data();
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                let mut dx = Vec::with_capacity(gd.len());
                for (drow, xrow) in gd.chunks_exact(c).zip(xs.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] += drow[j];
                        sum_dy_xhat[j] += drow[j] * (xrow[j] - mean[j]) * inv_std[j];
                        dx.push(drow[j] * gm[j] * inv_std[j]);
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
                accumulate(grads, *gamma, &[c], sum_dy_xhat);
                accumulate(grads, *beta, &[c], sum_dy);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (&idx, &d) in argmax.iter().zip(gd) {
                    dx[idx] += d;
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape();
                let (hw, c) = (shape[1] * shape[2], shape[3]);
                let scale = S::lit(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for grow in gd.chunks_exact(c) {
                    for _ in 0..hw {
                        dx.extend(grow.iter().map(|&d| d * scale));
                    }
                }
                accumulate(grads, *x, shape, dx);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x);
                let (n, f) = (xs.shape()[0], xs.shape()[1]);
                let k = self.value(*w).shape()[1];
                let mut dx = vec![S::zero(); n * f];
                matmul(n, k, f, gd, false, self.value(*w).data(), true, &mut dx, S::zero());
                accumulate(grads, *x, &[n, f], dx);
                let mut dw = vec![S::zero(); f * k];
                matmul(f, n, k, xs.data(), true, gd, false, &mut dw, S::zero());
                accumulate(grads, *w, &[f, k], dw);
                if let Some(b) = b {
                    let mut db = vec![S::zero(); k];
                    for row in gd.chunks_exact(k) {
                        for (o, &d) in db.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                    accumulate(grads, *b, &[k], db);
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                let db = gd.iter().zip(va).map(|(&d, &x)| d * x).collect();
                accumulate(grads, *a, g.shape(), da);
                accumulate(grads, *b, g.shape(), db);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, self.value(*x).shape(), vec![gd[0]; n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = gd[0] / S::lit(labels.len() as f64);
                let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in dl.chunks_exact_mut(k).zip(labels) {
                    row[label] -= scale;
                }
                accumulate(grads, *logits, &[labels.len(), k], dl);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], var: Var, shape: &[usize], data: Vec<S>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
    }
}
