//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its output value plus whatever it
//! needs for the adjoint. [`Tape::backward`] walks the nodes once, newest
//! first, so each recorded operation contributes to its inputs exactly once.
//! Nodes that do not depend on a gradient-tracking leaf record no adjoint work.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batchnorm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Per-channel batch mean and biased variance (training mode).
    Batch,
    /// Stored running statistics (inference / fixed-statistics mode).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a training-mode batchnorm node. `var` is the
/// unbiased estimate used for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SpatialMask {
        x: Var,
        mask: Vec<f64>,
        channels: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records `t` as a leaf; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a tracked leaf for parameter slot `index` of some parameter
    /// store; its gradient is later available from [`Tape::param_grad`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter tensor is well formed");
        value.set_requires_grad(true);
        let v = self.push(value, Op::Leaf, true);
        self.params.push((index, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (oc, ic, kh, kw) = self.value(w).dims4()?;
        if ic != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ic}"),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{wd}"),
            ));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: oc,
            kernel: kh,
            stride,
            pad,
            out_height: (h + 2 * pad - kh) / stride + 1,
            out_width: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(vec![n, oc, geom.out_height, geom.out_width], out)?;
        let tracked = self.is_tracked(x) || self.is_tracked(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, tracked))
    }

    /// Per-channel batchnorm over `N×C×H×W`. In [`BnStats::Batch`] mode the
    /// observed moments are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} has shape {:?}, expected [{c}]", self.value(p).shape()),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let (mean, var_biased, moments) = match stats {
            BnStats::Batch => {
                if n < 2 {
                    return Err(Error::Unsupported(
                        "batchnorm2d in training mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        s += xs[off..off + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        ss += xs[off..off + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| v * count as f64 / (count - 1).max(1) as f64)
                    .collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(moments))
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("running stats sized {}/{}, expected {c}", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        if !tracked {
            xhat = Vec::new();
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: matches!(stats, BnStats::Batch),
            },
            tracked,
        );
        Ok((var, moments))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let tracked = self.is_tracked(x);
        self.push(value, Op::Relu { x }, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(value, Op::Add { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(value, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let tracked = self.is_tracked(x);
        self.push(value, Op::Scale { x, factor }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.is_tracked(x);
        self.push(value, Op::Sum { x }, tracked)
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| xs[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, tracked))
    }

    /// `y = x·Wᵀ + b` with `x: N×F`, `W: K×F`, `b: K`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (k, wf) = self.value(w).dims2()?;
        if wf != f {
            return Err(Error::shape(
                "linear",
                format!("input has {f} features, weight expects {wf}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [k] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{k}]", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0; n * k];
        if let Some(b) = b {
            let bs = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.copy_from_slice(bs);
            }
        }
        kernels::gemm(
            n,
            f,
            k,
            1.0,
            self.value(x).data(),
            (f, 1),
            self.value(w).data(),
            (1, f),
            1.0,
            &mut out,
            k,
        );
        let value = Tensor::new(vec![n, k], out)?;
        let tracked =
            self.is_tracked(x) || self.is_tracked(w) || b.is_some_and(|b| self.is_tracked(b));
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    /// Multiplies the first `channels` channels of `x: N×C×H×W` by a constant
    /// per-example spatial map `mask: N×H×W`; remaining channels pass through.
    pub fn spatial_mask(&mut self, x: Var, mask: Vec<f64>, channels: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if mask.len() != n * h * w {
            return Err(Error::shape(
                "spatial_mask",
                format!("mask has {} values, expected N·H·W = {}", mask.len(), n * h * w),
            ));
        }
        if channels > c {
            return Err(Error::shape(
                "spatial_mask",
                format!("{channels} masked channels requested, tensor has {c}"),
            ));
        }
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            let m = &mask[i * plane..(i + 1) * plane];
            for ch in 0..channels {
                let off = (i * c + ch) * plane;
                for (o, mv) in out[off..off + plane].iter_mut().zip(m) {
                    *o *= mv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::SpatialMask { x, mask, channels }, tracked))
    }

    /// `(1/N) Σₙ weightₙ · −log softmax(logitsₙ)[labelₙ]`, max-subtracted.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &xs[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
            total += weights[i] * (log_z - row[labels[i]]);
        }
        let value = Tensor::scalar(total / n as f64);
        let tracked = self.is_tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = self.value(logits).shape().first().copied().unwrap_or(0);
        self.weighted_cross_entropy(logits, labels, &vec![1.0; n])
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Autodiff(
                "backward on a value that does not depend on any tracked tensor".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].tracked {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.is_tracked(*x),
                    self.is_tracked(*w),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for j in off..off + plane {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] = if *batch_stats {
                                    // dx = γ·σ⁻¹·(dy − mean(dy) − x̂·mean(dy·x̂))
                                    scale
                                        * (g[j]
                                            - dbeta[ch] / count
                                            - xhat[j] * dgamma[ch] / count)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(d, y)| d * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(d, x)| d * x).collect()));
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.iter().map(|d| d * factor).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (chunk, &d) in dx.chunks_mut(plane).zip(g) {
                    chunk.fill(d * inv);
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2()?;
                let (k, _) = self.value(*w).dims2()?;
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, k, f, 1.0, g, (k, 1), self.value(*w).data(), (f, 1), 0.0, &mut dx, f);
                    out.push((*x, dx));
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![0.0; k * f];
                    kernels::gemm(k, n, f, 1.0, g, (1, k), self.value(*x).data(), (f, 1), 0.0, &mut dw, f);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::SpatialMask { x, mask, channels } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut dx = g.to_vec();
                for s in 0..n {
                    let m = &mask[s * plane..(s + 1) * plane];
                    for ch in 0..*channels {
                        let off = (s * c + ch) * plane;
                        for (d, mv) in dx[off..off + plane].iter_mut().zip(m) {
                            *d *= mv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = g[0] / n as f64;
                let mut dl = vec![0.0; n * k];
                for s in 0..n {
                    let ws = weights[s] * scale;
                    for j in 0..k {
                        let target = if j == labels[s] { 1.0 } else { 0.0 };
                        dl[s * k + j] = ws * (probs[s * k + j] - target);
                    }
                }
                out.push((*logits, dl));
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter slot `index`, summed over every time the slot
    /// was bound on this tape.
    pub fn param_grad(&self, index: usize) -> Option<Vec<f64>> {
        let mut total: Option<Vec<f64>> = None;
        for &(idx, v) in &self.params {
            if idx != index {
                continue;
            }
            if let Some(g) = self.grad(v) {
                match &mut total {
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => total = Some(g.to_vec()),
                }
            }
        }
        total
    }
}
