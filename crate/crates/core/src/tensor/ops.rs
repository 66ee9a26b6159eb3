use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::gemm::{gemm, Transpose};
use super::tape::{CustomOp, GradSink, Tape, Var};
use super::Tensor;
use crate::error::{fmt_shape, Error, Result};

/// Forward-pass regime for layers whose behavior differs between training
/// and evaluation (batch normalization, dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        /// Per-image im2col buffers, kept only when the kernel needs a gradient.
        cols: Option<Vec<f64>>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Option<Vec<f64>>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }

    pub(crate) fn backward(&self, values: &[Tensor], idx: usize, g: &[f64], sink: &mut GradSink<'_>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add(*a, g);
                sink.add(*b, g);
            }
            Op::Sub(a, b) => {
                sink.add(*a, g);
                if let Some(gb) = sink.slot(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if sink.wants(*a) {
                    let c: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    sink.add(*a, &c);
                }
                if sink.wants(*b) {
                    let c: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    sink.add(*b, &c);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = sink.slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Square(a) => {
                let va = values[a.0].data();
                if let Some(ga) = sink.slot(*a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                        *x += 2.0 * v * y;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = sink.slot(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = values[a.0].len() as f64;
                if let Some(ga) = sink.slot(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Relu(a) => {
                let out = values[idx].data();
                if let Some(ga) = sink.slot(*a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => linear_backward(values, *x, *w, *b, g, sink),
            Op::Conv2d { x, k, b, cols } => conv2d_backward(values, *x, *k, *b, cols.as_deref(), g, sink),
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = sink.slot(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = values[x.0].shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(gx) = sink.slot(*x) {
                    for i in 0..n * c {
                        let gi = g[i] / hw as f64;
                        gx[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v += gi);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => batchnorm_backward(values, *x, *gamma, *beta, xhat, inv_std, *batch_stats, g, sink),
            Op::Dropout { x, mask } => match mask {
                Some(m) => {
                    if let Some(gx) = sink.slot(*x) {
                        for ((a, b), m) in gx.iter_mut().zip(g).zip(m) {
                            *a += b * m;
                        }
                    }
                }
                None => sink.add(*x, g),
            },
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = values[logits.0].shape()[1];
                let n = targets.len();
                let scale = g[0] / n as f64;
                if let Some(gl) = sink.slot(*logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                let contributions = op.backward(&ins, &values[idx], g);
                for (v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        sink.add(*v, &c);
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            alloc::format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(
            op,
            alloc::format!("expected rank {rank}, got {}", fmt_shape(t.shape())),
        ));
    }
    Ok(())
}

impl Tape {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn zip_map(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| s * x);
        let rg = self.requires_grad(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        let rg = self.requires_grad(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.requires_grad(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// `x[N,D] · Wᵀ + b` with `W` stored as `[K,D]` (one row per output unit).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("linear", tx, 2)?;
        expect_rank("linear", tw, 2)?;
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        let k = tw.shape()[0];
        if tw.shape()[1] != d || tb.len() != k {
            return Err(Error::shape(
                "linear",
                alloc::format!(
                    "x {} w {} b {}",
                    fmt_shape(tx.shape()),
                    fmt_shape(tw.shape()),
                    fmt_shape(tb.shape())
                ),
            ));
        }
        let mut out = vec![0.0; n * k];
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(tb.data());
        }
        gemm(n, d, k, 1.0, tx.data(), Transpose::No, tw.data(), Transpose::Yes, 1.0, &mut out);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Same-padded, stride-1 cross-correlation (no kernel flip).
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(k), self.value(b));
        expect_rank("conv2d", tx, 4)?;
        expect_rank("conv2d", tk, 4)?;
        let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [f, kc, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                alloc::format!("kernel must be square with odd extent, got {kh}x{kw}"),
            ));
        }
        if tb.len() != f {
            return Err(Error::shape("conv2d", alloc::format!("bias has {} entries for {f} filters", tb.len())));
        }
        let hw = h * w;
        let ckk = c * kh * kw;
        let keep_cols = self.requires_grad(k);
        let mut all_cols = if keep_cols { vec![0.0; n * ckk * hw] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; ckk * hw] };
        let mut out = vec![0.0; n * f * hw];
        for img in 0..n {
            let cols: &mut [f64] = if keep_cols {
                &mut all_cols[img * ckk * hw..(img + 1) * ckk * hw]
            } else {
                &mut scratch
            };
            im2col(&tx.data()[img * c * hw..(img + 1) * c * hw], c, h, w, kh, cols);
            let o = &mut out[img * f * hw..(img + 1) * f * hw];
            for (fi, row) in o.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = tb.data()[fi]);
            }
            gemm(f, ckk, hw, 1.0, tk.data(), Transpose::No, cols, Transpose::No, 1.0, o);
        }
        let rg = self.any_grad(&[x, k, b]);
        let value = Tensor::new(vec![n, f, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                b,
                cols: keep_cols.then_some(all_cols),
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing
    /// rows/columns that do not fill a window are dropped. Ties resolve to the
    /// first maximal element in row-major order.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("max_pool", tx, 4)?;
        if size == 0 {
            return Err(Error::shape("max_pool", "pooling extent must be positive"));
        }
        let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (oh, ow) = (h / size, w / size);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(
                "max_pool",
                alloc::format!("window {size} larger than input {h}x{w}"),
            ));
        }
        let src = tx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let at = base + (oy * size + dy) * w + ox * size + dx;
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(src[best_at]);
                    argmax.push(best_at);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        self.max_pool(x, 2)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("global_avg_pool", tx, 4)?;
        let s = tx.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = tx
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Per-channel batch normalization over `(N, H, W)`.
    ///
    /// In training mode the batch statistics normalize the input and update
    /// the running estimates (unbiased variance); in evaluation mode the
    /// running estimates are used and `state` is left untouched.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let tx = self.value(x);
        expect_rank("batch_norm2d", tx, 4)?;
        let s = tx.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).len() != c || self.value(beta).len() != c || state.running_mean.len() != c {
            return Err(Error::shape("batch_norm2d", alloc::format!("parameters do not match {c} channels")));
        }
        let m = (n * hw) as f64;
        let src = tx.data();
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        let batch_stats = mode == Mode::Train;
        for ch in 0..c {
            let (mu, var) = if batch_stats {
                let mut sum = 0.0;
                for img in 0..n {
                    sum += src[(img * c + ch) * hw..(img * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for img in 0..n {
                    sq += src[(img * c + ch) * hw..(img * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                let var = sq / m;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
                state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
                (mu, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            mean[ch] = mu;
            inv_std[ch] = 1.0 / libm::sqrt(var + state.eps);
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for img in 0..n {
            for ch in 0..c {
                let r = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                for i in r {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` in training mode;
    /// identity in evaluation mode or at `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::input(alloc::format!("dropout rate {rate} outside [0,1)")));
        }
        let rg = self.requires_grad(x);
        if mode == Mode::Eval || rate == 0.0 {
            let v = self.value(x).clone();
            return Ok(self.push(v, Op::Dropout { x, mask: None }, rg));
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask: Some(mask) }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        expect_rank("softmax_cross_entropy", t, 2)?;
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if targets.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                alloc::format!("{} targets for batch of {n}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::input(alloc::format!("target class {bad} outside [0,{k})")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks_exact(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = libm::exp(v - max);
                probs[i * k + j] = e;
                z += e;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += -(row[targets[i]] - max - libm::log(z));
        }
        loss /= n as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, ks: usize, cols: &mut [f64]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..ks {
            for kj in 0..ks {
                let row = &mut cols[((ch * ks + ki) * ks + kj) * hw..((ch * ks + ki) * ks + kj + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, ks: usize, x: &mut [f64]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..ks {
            for kj in 0..ks {
                let row = &cols[((ch * ks + ki) * ks + kj) * hw..((ch * ks + ki) * ks + kj + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, v) in src.iter().enumerate() {
                        let sx = xo as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn linear_backward(values: &[Tensor], x: Var, w: Var, b: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let (tx, tw) = (&values[x.0], &values[w.0]);
    let (n, d) = (tx.shape()[0], tx.shape()[1]);
    let k = tw.shape()[0];
    if let Some(gx) = sink.slot(x) {
        gemm(n, k, d, 1.0, g, Transpose::No, tw.data(), Transpose::No, 1.0, gx);
    }
    if let Some(gw) = sink.slot(w) {
        gemm(k, n, d, 1.0, g, Transpose::Yes, tx.data(), Transpose::No, 1.0, gw);
    }
    if let Some(gb) = sink.slot(b) {
        for row in g.chunks_exact(k) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
}

fn conv2d_backward(
    values: &[Tensor],
    x: Var,
    k: Var,
    b: Var,
    cols: Option<&[f64]>,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let (tx, tk) = (&values[x.0], &values[k.0]);
    let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
    let [f, _, ks, _] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
    let hw = h * w;
    let ckk = c * ks * ks;

    if let Some(gb) = sink.slot(b) {
        for img in 0..n {
            for (fi, row) in g[img * f * hw..(img + 1) * f * hw].chunks_exact(hw).enumerate() {
                gb[fi] += row.iter().sum::<f64>();
            }
        }
    }
    if sink.wants(k) {
        let mut scratch = Vec::new();
        let gk = sink.slot(k).expect("kernel requires grad");
        for img in 0..n {
            let col: &[f64] = match cols {
                Some(all) => &all[img * ckk * hw..(img + 1) * ckk * hw],
                None => {
                    scratch.resize(ckk * hw, 0.0);
                    im2col(&tx.data()[img * c * hw..(img + 1) * c * hw], c, h, w, ks, &mut scratch);
                    &scratch
                }
            };
            let go = &g[img * f * hw..(img + 1) * f * hw];
            gemm(f, hw, ckk, 1.0, go, Transpose::No, col, Transpose::Yes, 1.0, gk);
        }
    }
    if let Some(gx) = sink.slot(x) {
        let mut dcols = vec![0.0; ckk * hw];
        for img in 0..n {
            let go = &g[img * f * hw..(img + 1) * f * hw];
            gemm(ckk, f, hw, 1.0, tk.data(), Transpose::Yes, go, Transpose::No, 0.0, &mut dcols);
            col2im_add(&dcols, c, h, w, ks, &mut gx[img * c * hw..(img + 1) * c * hw]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward(
    values: &[Tensor],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let s = values[x.0].shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = (n * hw) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            for i in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(gg) = sink.slot(gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v);
    }
    if let Some(gb) = sink.slot(beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v);
    }
    let gam = values[gamma.0].data();
    if let Some(gx) = sink.slot(x) {
        for img in 0..n {
            for ch in 0..c {
                let scale = gam[ch] * inv_std[ch];
                for i in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                    gx[i] += if batch_stats {
                        scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
    }
}
