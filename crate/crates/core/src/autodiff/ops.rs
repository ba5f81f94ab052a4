//! Differentiable operations: forward evaluation plus the matching reverse rule.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{conv_backward, conv_forward, gemm, ConvGeom, Mat};
use super::tape::{grad_buf, Mode, Node, Op, Tape, Var};

/// Variance floor added inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

/// Which statistics a batch-norm call normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum Normalize<'a> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Running per-channel statistics kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Weight of the previous running value in each update.
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.9,
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Result of a batch-norm call. Batch statistics are reported in training form
/// (unbiased variance) for the caller's running-stat update.
#[derive(Debug)]
pub struct BatchNormOut {
    pub out: Var,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: {:?} · {:?} inner dimensions disagree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Mat::rows(self.value(a).data(), k),
            Mat::rows(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b)))
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.value(x).map(|v| scale * v + shift);
        self.push(data, Op::Affine { x, scale })
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "row bias {:?} does not fit rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, bias }))
    }

    /// Adds `v[B×C]` to every spatial position of `x[B×C×H×W]`.
    pub fn add_spatial(&mut self, x: Var, v: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [b, c] {
            return Err(Error::dim(format!(
                "spatial broadcast of {:?} onto {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for (plane, add) in out.data_mut().chunks_mut(h * w).zip(&vv) {
            for o in plane {
                *o += add;
            }
        }
        Ok(self.push(out, Op::AddSpatial { x, v }))
    }

    /// 2-D cross-correlation with zero padding. `w: K×C×kh×kw`, optional `bias: K`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        let (k, c2, kh, kw) = self.value(w).dims4()?;
        if c != c2 {
            return Err(Error::dim(format!(
                "conv2d: input {:?} has {c} channels, kernel {:?} expects {c2}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [k] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} for {k} output channels",
                    self.shape(bv)
                )));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
            b,
            k,
            &geom,
        );
        let t = Tensor::new(&[b, k, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, bias, geom }))
    }

    /// Per-channel normalization of `x[B×C×H×W]` followed by `γ·x̂ + β`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        how: Normalize<'_>,
    ) -> Result<BatchNormOut> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch_norm: input has {c} channels, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let plane = h * w;
        let n = (b * plane) as f64;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match how {
            Normalize::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let p = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        mean[ci] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for bi in 0..b {
                    for ci in 0..c {
                        let p = &xv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        var[ci] += p.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let unbiased = if n > 1.0 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Normalize::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: running stats sized {} / {} for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                for (idx, &v) in r.clone().zip(&xv[r]) {
                    let xh = (v - mean[ci]) * inv_std[ci];
                    xhat[idx] = xh;
                    out[idx] = g[ci] * xh + be[ci];
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let out = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: batch_stats.is_some(),
            },
        );
        Ok(BatchNormOut { out, batch_stats })
    }

    /// Batch norm that reads or updates `stats` according to `mode`.
    pub fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let r = self.batch_norm(x, gamma, beta, Normalize::Batch)?;
                if let Some((m, v)) = &r.batch_stats {
                    stats.update(m, v);
                }
                Ok(r.out)
            }
            Mode::Eval => {
                let r = self.batch_norm(
                    x,
                    gamma,
                    beta,
                    Normalize::Running {
                        mean: &stats.mean,
                        var: &stats.var,
                    },
                )?;
                Ok(r.out)
            }
        }
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Tanh => {
                let t = self.value(x).map(f64::tanh);
                self.push(t, Op::Tanh(x))
            }
            Activation::Sigmoid => {
                let t = self.value(x).map(sigmoid);
                self.push(t, Op::Sigmoid(x))
            }
            Activation::Relu => {
                let t = self.value(x).map(|v| v.max(0.0));
                self.push(t, Op::Relu(x))
            }
        }
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Softmax over each whole `H×W` plane of `a[B×1×H×W]`.
    ///
    /// `mask` (length `B·H·W`, `true` = valid) excludes cells; excluded cells
    /// receive weight exactly zero. Every plane needs at least one valid cell.
    pub fn softmax_plane(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if c != 1 {
            return Err(Error::dim(format!(
                "softmax_plane expects one channel, got {:?}",
                self.shape(a)
            )));
        }
        let plane = h * w;
        if let Some(m) = mask {
            if m.len() != b * plane {
                return Err(Error::dim(format!(
                    "softmax_plane mask has {} cells for {:?}",
                    m.len(),
                    self.shape(a)
                )));
            }
        }
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..b {
            let r = bi * plane..(bi + 1) * plane;
            let valid = |i: usize| mask.is_none_or(|m| m[i]);
            let mx = r
                .clone()
                .filter(|&i| valid(i))
                .map(|i| av[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Argument(format!(
                    "softmax_plane: plane {bi} has no valid cell"
                )));
            }
            let mut z = 0.0;
            for i in r.clone() {
                if valid(i) {
                    let e = (av[i] - mx).exp();
                    out[i] = e;
                    z += e;
                }
            }
            for o in &mut out[r] {
                *o /= z;
            }
        }
        let t = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(t, Op::SoftmaxPlane(a)))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Argument("concat_channels of nothing".into()))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &x in xs {
            let (b2, c, h2, w2) = self.value(x).dims4()?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(Error::dim(format!(
                    "concat_channels: {:?} does not match {:?} in batch/spatial dims",
                    self.shape(x),
                    self.shape(first)
                )));
            }
            total += c;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let t = Tensor::new(&[b, total, h, w], out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec())))
    }

    /// Non-overlapping 2×2 mean pooling; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!(
                "avg_pool2 needs at least 2×2, got {:?}",
                self.shape(x)
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * s;
                }
            }
        }
        let t = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2(x)))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` so eval is identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Row lookup: `table[V×E]`, one id per output row.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Argument("gather_rows with no ids".into()));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary(format!(
                    "token id {id} outside vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        let t = Tensor::new(&[ids.len(), e], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `s[b,c] = Σ_ij α[b,0,i,j]·F[b,c,i,j]`.
    pub fn context(&mut self, alpha: Var, features: Var) -> Result<Var> {
        let (b, one, h, w) = self.value(alpha).dims4()?;
        let (fb, c, fh, fw) = self.value(features).dims4()?;
        if one != 1 || (b, h, w) != (fb, fh, fw) {
            return Err(Error::dim(format!(
                "context: attention {:?} does not match features {:?}",
                self.shape(alpha),
                self.shape(features)
            )));
        }
        let plane = h * w;
        let av = self.value(alpha).data();
        let fv = self.value(features).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let a = &av[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let f = &fv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out[bi * c + ci] = a.iter().zip(f).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[b, c], out)?;
        Ok(self.push(t, Op::Context { alpha, features }))
    }

    /// `Σ_b w_b · −log softmax(logits_b)[target_b]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (b, v) = self.value(logits).dims2()?;
        if targets.len() != b || weights.len() != b {
            return Err(Error::dim(format!(
                "cross_entropy: {b} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * v];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &lv[bi * v..(bi + 1) * v];
            let t = targets[bi];
            if t >= v {
                return Err(Error::Vocabulary(format!(
                    "target id {t} outside vocabulary of {v}"
                )));
            }
            let p = softmax_row(row);
            let lse = log_sum_exp(row);
            loss += weights[bi] * (lse - row[t]);
            probs[bi * v..(bi + 1) * v].copy_from_slice(&p);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn add_scaled(buf: &mut [f64], src: impl Iterator<Item = f64>) {
    for (b, s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}

/// Reverse rule for node `i` given its output gradient `g`.
pub(crate) fn backprop(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    let gd = g.data();
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("rank 2");
            let n = nodes[b.0].value.shape()[1];
            if let Some(da) = grad_buf(grads, nodes, *a) {
                // da += g · bᵀ
                gemm(m, n, k, Mat::rows(gd, n), Mat::t(val(*b), n), 1.0, da);
            }
            if let Some(db) = grad_buf(grads, nodes, *b) {
                // db += aᵀ · g
                gemm(k, m, n, Mat::t(val(*a), k), Mat::rows(gd, n), 1.0, db);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = grad_buf(grads, nodes, *v) {
                    add_scaled(d, gd.iter().copied());
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = grad_buf(grads, nodes, *a) {
                add_scaled(d, gd.iter().copied());
            }
            if let Some(d) = grad_buf(grads, nodes, *b) {
                add_scaled(d, gd.iter().map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = grad_buf(grads, nodes, *a) {
                add_scaled(d, gd.iter().zip(val(*b)).map(|(g, y)| g * y));
            }
            if let Some(d) = grad_buf(grads, nodes, *b) {
                add_scaled(d, gd.iter().zip(val(*a)).map(|(g, x)| g * x));
            }
        }
        Op::Affine { x, scale } => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().map(|g| g * scale));
            }
        }
        Op::AddRowBias { x, bias } => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().copied());
            }
            let n = nodes[bias.0].value.len();
            if let Some(d) = grad_buf(grads, nodes, *bias) {
                for row in gd.chunks(n) {
                    add_scaled(d, row.iter().copied());
                }
            }
        }
        Op::AddSpatial { x, v } => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().copied());
            }
            let (_, _, h, w) = nodes[x.0].value.dims4().expect("rank 4");
            if let Some(d) = grad_buf(grads, nodes, *v) {
                for (dv, plane) in d.iter_mut().zip(gd.chunks(h * w)) {
                    *dv += plane.iter().sum::<f64>();
                }
            }
        }
        Op::Conv2d { x, w, bias, geom } => {
            let batch = nodes[x.0].value.shape()[0];
            let k = nodes[w.0].value.shape()[0];
            // Three disjoint buffers are needed at once; take them out of the
            // grad table while the kernel runs.
            let mut take = |v: Var| -> Option<Tensor> {
                grad_buf(grads, nodes, v)?;
                grads[v.0].take()
            };
            let mut dx = take(*x);
            let mut dw = take(*w);
            let mut db = bias.and_then(&mut take);
            conv_backward(
                val(*x),
                val(*w),
                gd,
                batch,
                k,
                geom,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            if let Some(t) = dx {
                grads[x.0] = Some(t);
            }
            if let Some(t) = dw {
                grads[w.0] = Some(t);
            }
            if let (Some(t), Some(bv)) = (db, bias) {
                grads[bv.0] = Some(t);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (b, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
            let plane = h * w;
            let n = (b * plane) as f64;
            let gam = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                    for idx in r {
                        sum_g[ci] += gd[idx];
                        sum_gx[ci] += gd[idx] * xhat[idx];
                    }
                }
            }
            if let Some(d) = grad_buf(grads, nodes, *gamma) {
                add_scaled(d, sum_gx.iter().copied());
            }
            if let Some(d) = grad_buf(grads, nodes, *beta) {
                add_scaled(d, sum_g.iter().copied());
            }
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                        let s = gam[ci] * inv_std[ci];
                        for idx in r {
                            d[idx] += if *batch_stats {
                                s * (gd[idx] - sum_g[ci] / n - xhat[idx] * sum_gx[ci] / n)
                            } else {
                                s * gd[idx]
                            };
                        }
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)));
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)));
            }
        }
        Op::Relu(x) => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(
                    d,
                    gd.iter()
                        .zip(val(*x))
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }),
                );
            }
        }
        Op::SoftmaxPlane(a) => {
            let (b, _, h, w) = nodes[a.0].value.dims4().expect("rank 4");
            let plane = h * w;
            if let Some(d) = grad_buf(grads, nodes, *a) {
                for bi in 0..b {
                    let r = bi * plane..(bi + 1) * plane;
                    let dot: f64 = r.clone().map(|i| gd[i] * out[i]).sum();
                    for i in r {
                        d[i] += out[i] * (gd[i] - dot);
                    }
                }
            }
        }
        Op::Concat(xs) => {
            let (b, total, h, w) = nodes[i].value.dims4().expect("rank 4");
            let plane = h * w;
            let mut offset = 0;
            for x in xs {
                let c = nodes[x.0].value.shape()[1];
                if let Some(d) = grad_buf(grads, nodes, *x) {
                    for bi in 0..b {
                        let src = &gd[(bi * total + offset) * plane..(bi * total + offset + c) * plane];
                        add_scaled(&mut d[bi * c * plane..(bi + 1) * c * plane], src.iter().copied());
                    }
                }
                offset += c;
            }
        }
        Op::AvgPool2(x) => {
            let (b, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
            let (oh, ow) = (h / 2, w / 2);
            if let Some(d) = grad_buf(grads, nodes, *x) {
                for p in 0..b * c {
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gq = 0.25 * src[i * ow + j];
                            dst[2 * i * w + 2 * j] += gq;
                            dst[2 * i * w + 2 * j + 1] += gq;
                            dst[(2 * i + 1) * w + 2 * j] += gq;
                            dst[(2 * i + 1) * w + 2 * j + 1] += gq;
                        }
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(d) = grad_buf(grads, nodes, *x) {
                add_scaled(d, gd.iter().zip(mask).map(|(g, m)| g * m));
            }
        }
        Op::Gather { table, ids } => {
            let e = nodes[table.0].value.shape()[1];
            if let Some(d) = grad_buf(grads, nodes, *table) {
                for (row, &id) in gd.chunks(e).zip(ids) {
                    add_scaled(&mut d[id * e..(id + 1) * e], row.iter().copied());
                }
            }
        }
        Op::Context { alpha, features } => {
            let (b, c, h, w) = nodes[features.0].value.dims4().expect("rank 4");
            let plane = h * w;
            let fv = val(*features);
            let av = val(*alpha);
            if let Some(d) = grad_buf(grads, nodes, *alpha) {
                for bi in 0..b {
                    let da = &mut d[bi * plane..(bi + 1) * plane];
                    for ci in 0..c {
                        let gq = gd[bi * c + ci];
                        let f = &fv[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        add_scaled(da, f.iter().map(|x| gq * x));
                    }
                }
            }
            if let Some(d) = grad_buf(grads, nodes, *features) {
                for bi in 0..b {
                    let a = &av[bi * plane..(bi + 1) * plane];
                    for ci in 0..c {
                        let gq = gd[bi * c + ci];
                        let df = &mut d[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        add_scaled(df, a.iter().map(|x| gq * x));
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = nodes[logits.0].value.shape()[1];
            let g0 = gd[0];
            if let Some(d) = grad_buf(grads, nodes, *logits) {
                for (bi, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let row = &mut d[bi * v..(bi + 1) * v];
                    for (j, r) in row.iter_mut().enumerate() {
                        let p = probs[bi * v + j] - if j == t { 1.0 } else { 0.0 };
                        *r += g0 * wt * p;
                    }
                }
            }
        }
        Op::Sum(x) => {
            let g0 = gd[0];
            if let Some(d) = grad_buf(grads, nodes, *x) {
                d.iter_mut().for_each(|v| *v += g0);
            }
        }
    }
}
