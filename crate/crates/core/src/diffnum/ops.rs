//! Forward and backward kernels for every differentiable operation the
//! beamformer, its losses and the BN adaptation loop use.
//!
//! Kernels are pure functions over [`TensorR`]; the [`super::Tape`] records
//! which kernel ran and replays the matching backward in reverse.

use serde::{Deserialize, Serialize};

use super::TensorR;
use crate::{Error, Result};

/// Stride and zero padding of a 2-D convolution, `(width, height)` each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn same3() -> Self {
        Self {
            stride: (1, 1),
            padding: (1, 1),
        }
    }
}

/// Output extent along one axis: `(input + 2 * padding - kernel) / stride + 1`.
///
/// Fails when the division is inexact or the numerator is negative.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Architecture(format!(
            "kernel ({kernel}) and stride ({stride}) must be >= 1"
        )));
    }
    let span = input + 2 * padding;
    if span < kernel {
        return Err(Error::Architecture(format!(
            "kernel {kernel} exceeds padded input {span}"
        )));
    }
    let numer = span - kernel;
    if !numer.is_multiple_of(stride) {
        return Err(Error::Architecture(format!(
            "output dimension ({input} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok(numer / stride + 1)
}

/// Cross-correlation of `[B, W, H, Cin]` with kernels `[kw, kh, Cin, Cout]` plus bias.
pub fn conv2d(input: &TensorR, kernel: &TensorR, bias: &TensorR, geom: ConvGeometry) -> Result<TensorR> {
    let (b, w, h, cin) = input.dims4()?;
    let (kw, kh, kcin, cout) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "bias has {} entries for {cout} outputs",
            bias.len()
        )));
    }
    let ow = conv_output_dim(w, kw, geom.stride.0, geom.padding.0)?;
    let oh = conv_output_dim(h, kh, geom.stride.1, geom.padding.1)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; b * ow * oh * cout];
    for bi in 0..b {
        for ox in 0..ow {
            for oy in 0..oh {
                let o_base = ((bi * ow + ox) * oh + oy) * cout;
                out[o_base..o_base + cout].copy_from_slice(bias.data());
                for i in 0..kw {
                    let ix = (ox * geom.stride.0 + i) as isize - geom.padding.0 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for j in 0..kh {
                        let iy = (oy * geom.stride.1 + j) as isize - geom.padding.1 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * w + ix as usize) * h + iy as usize) * cin;
                        let k_base = (i * kh + j) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[x_base + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[k_base + ci * cout..k_base + (ci + 1) * cout];
                            for (o, kv) in out[o_base..o_base + cout].iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    TensorR::new(vec![b, ow, oh, cout], out)
}

/// Gradients of [`conv2d`] w.r.t. `(input, kernel, bias)`; each is only
/// computed when requested.
pub fn conv2d_backward(
    input: &TensorR,
    kernel: &TensorR,
    geom: ConvGeometry,
    grad_out: &TensorR,
    need: [bool; 3],
) -> Result<(Option<TensorR>, Option<TensorR>, Option<TensorR>)> {
    let (b, w, h, cin) = input.dims4()?;
    let (kw, kh, _, cout) = kernel.dims4()?;
    let (gb, ow, oh, gc) = grad_out.dims4()?;
    if gb != b || gc != cout {
        return Err(Error::shape("conv2d upstream gradient shape mismatch"));
    }
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = need[0].then(|| vec![0.0; x.len()]);
    let mut gk = need[1].then(|| vec![0.0; k.len()]);
    let mut gbias = need[2].then(|| vec![0.0; cout]);
    for bi in 0..b {
        for ox in 0..ow {
            for oy in 0..oh {
                let o_base = ((bi * ow + ox) * oh + oy) * cout;
                let grow = &g[o_base..o_base + cout];
                if let Some(gb) = gbias.as_mut() {
                    for (acc, v) in gb.iter_mut().zip(grow) {
                        *acc += v;
                    }
                }
                for i in 0..kw {
                    let ix = (ox * geom.stride.0 + i) as isize - geom.padding.0 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    for j in 0..kh {
                        let iy = (oy * geom.stride.1 + j) as isize - geom.padding.1 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_base = ((bi * w + ix as usize) * h + iy as usize) * cin;
                        let k_base = (i * kh + j) * cin * cout;
                        for ci in 0..cin {
                            let krange = k_base + ci * cout..k_base + (ci + 1) * cout;
                            if let Some(gx) = gx.as_mut() {
                                gx[x_base + ci] += k[krange.clone()].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gk) = gk.as_mut() {
                                let xv = x[x_base + ci];
                                for (acc, gv) in gk[krange].iter_mut().zip(grow) {
                                    *acc += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gx.map(|d| TensorR::new(input.shape().to_vec(), d)).transpose()?,
        gk.map(|d| TensorR::new(kernel.shape().to_vec(), d)).transpose()?,
        gbias.map(|d| TensorR::new(vec![cout], d)).transpose()?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Infer,
}

/// Running mean and variance accumulated as a dataset-wide average of
/// per-batch statistics, with the stored variance inflated by `B/(B-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batches: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches: 0,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.batches > 0
    }

    pub fn reset(&mut self) {
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.var.iter_mut().for_each(|v| *v = 1.0);
        self.batches = 0;
    }

    /// Folds one mini-batch's mean and biased variance into the running average.
    pub fn accumulate(&mut self, batch_mean: &[f64], batch_var: &[f64], batch: usize) {
        let k = (self.batches + 1) as f64;
        let unbias = batch as f64 / (batch as f64 - 1.0);
        if self.batches == 0 {
            self.mean.copy_from_slice(batch_mean);
            for (v, bv) in self.var.iter_mut().zip(batch_var) {
                *v = unbias * bv;
            }
        } else {
            for (m, bm) in self.mean.iter_mut().zip(batch_mean) {
                *m += (bm - *m) / k;
            }
            for (v, bv) in self.var.iter_mut().zip(batch_var) {
                *v += (unbias * bv - *v) / k;
            }
        }
        self.batches += 1;
    }
}

/// Values saved by the forward pass of [`batchnorm`].
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mode: BnMode,
    pub xnor: TensorR,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Batch normalization over every axis except the trailing channel axis.
///
/// The leading axis is the batch; train mode needs at least two entries.
pub fn batchnorm(
    input: &TensorR,
    gamma: &TensorR,
    beta: &TensorR,
    mode: BnMode,
    running: &RunningStats,
    eps: f64,
) -> Result<(TensorR, BnSaved)> {
    let c = *input.shape().last().ok_or_else(|| Error::shape("empty shape"))?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!("affine parameters must have {c} entries")));
    }
    let batch = input.shape()[0];
    let n = input.len() / c;
    let x = input.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            if batch < 2 {
                return Err(Error::DegenerateBatch(batch));
            }
            let mut mean = vec![0.0; c];
            for row in x.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            // second pass removes the rounding error of the first (exact for constant channels)
            let mut fix = vec![0.0; c];
            for row in x.chunks_exact(c) {
                for ((f, v), m) in fix.iter_mut().zip(row).zip(&mean) {
                    *f += v - m;
                }
            }
            for (m, f) in mean.iter_mut().zip(&fix) {
                *m += f / n as f64;
            }
            let mut var = vec![0.0; c];
            for row in x.chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        }
        BnMode::Infer => {
            if !running.is_populated() {
                return Err(Error::arg(
                    "inference-mode batch normalization needs populated running statistics",
                ));
            }
            if running.mean.len() != c {
                return Err(Error::shape("running statistics channel count mismatch"));
            }
            (running.mean.clone(), running.var.clone())
        }
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| {
            let d = v + eps;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut xnor = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for (idx, (xv, (xn, o))) in x.iter().zip(xnor.iter_mut().zip(out.iter_mut())).enumerate() {
        let ch = idx % c;
        *xn = (xv - mean[ch]) * inv_std[ch];
        *o = gamma.data()[ch] * *xn + beta.data()[ch];
    }
    let shape = input.shape().to_vec();
    Ok((
        TensorR::new(shape.clone(), out)?,
        BnSaved {
            mode,
            xnor: TensorR::new(shape, xnor)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Gradients of [`batchnorm`]: `(input, gamma, beta)`.
///
/// With `affine_only` the input gradient is skipped entirely.
pub fn batchnorm_backward(
    saved: &BnSaved,
    gamma: &TensorR,
    grad_out: &TensorR,
    affine_only: bool,
) -> (Option<TensorR>, TensorR, TensorR) {
    let c = gamma.len();
    let g = grad_out.data();
    let xn = saved.xnor.data();
    let n = g.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (idx, (gv, xv)) in g.iter().zip(xn).enumerate() {
        let ch = idx % c;
        dgamma[ch] += gv * xv;
        dbeta[ch] += gv;
    }
    let dx = (!affine_only).then(|| {
        let mut dx = vec![0.0; g.len()];
        match saved.mode {
            BnMode::Infer => {
                for (idx, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
                    let ch = idx % c;
                    *d = gamma.data()[ch] * saved.inv_std[ch] * gv;
                }
            }
            BnMode::Train => {
                let nf = n as f64;
                for (idx, (d, (gv, xv))) in dx.iter_mut().zip(g.iter().zip(xn)).enumerate() {
                    let ch = idx % c;
                    *d = gamma.data()[ch] * saved.inv_std[ch] * (gv - dbeta[ch] / nf - xv * dgamma[ch] / nf);
                }
            }
        }
        TensorR::new(grad_out.shape().to_vec(), dx).expect("shape preserved")
    });
    (
        dx,
        TensorR::new(vec![c], dgamma).expect("channel count"),
        TensorR::new(vec![c], dbeta).expect("channel count"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activation(input: &TensorR, kind: Activation) -> TensorR {
    let f = match kind {
        Activation::Relu => |v: f64| v.max(0.0),
        Activation::Tanh => f64::tanh,
    };
    TensorR::from_fn(input.shape(), |i| f(input.data()[i]))
}

/// Elementwise derivative gated by the upstream gradient. `output` is the
/// forward result (used by tanh), `input` the forward argument (used by relu).
pub fn activation_backward(input: &TensorR, output: &TensorR, kind: Activation, grad_out: &TensorR) -> TensorR {
    let g = grad_out.data();
    match kind {
        Activation::Relu => TensorR::from_fn(input.shape(), |i| if input.data()[i] > 0.0 { g[i] } else { 0.0 }),
        Activation::Tanh => TensorR::from_fn(input.shape(), |i| {
            let y = output.data()[i];
            (1.0 - y * y) * g[i]
        }),
    }
}

/// Gradient reversal: identity forward, `-lambda * upstream` backward.
pub fn grl_backward(grad_out: &TensorR, lambda: f64) -> TensorR {
    TensorR::from_fn(grad_out.shape(), |i| -lambda * grad_out.data()[i])
}

/// Global average pooling `[B, W, H, C] -> [B, C]`.
pub fn gap(input: &TensorR) -> Result<TensorR> {
    let (b, w, h, c) = input.dims4()?;
    let plane = (w * h) as f64;
    let mut out = vec![0.0; b * c];
    for (bi, item) in input.data().chunks_exact(w * h * c).enumerate() {
        for row in item.chunks_exact(c) {
            for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= plane);
    TensorR::new(vec![b, c], out)
}

pub fn gap_backward(input_shape: &[usize], grad_out: &TensorR) -> TensorR {
    let (w, h, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let scale = 1.0 / (w * h) as f64;
    TensorR::from_fn(input_shape, |idx| {
        let ch = idx % c;
        let bi = idx / (w * h * c);
        grad_out.data()[bi * c + ch] * scale
    })
}

/// Fully connected map `[B, C] -> [B, T]` with weights `[T, C]`.
pub fn fc(input: &TensorR, weights: &TensorR, bias: &TensorR) -> Result<TensorR> {
    let (b, c) = input.dims2()?;
    let (t, wc) = weights.dims2()?;
    if wc != c || bias.len() != t {
        return Err(Error::shape(format!(
            "fc weights {:?} / bias {} do not match input width {c}",
            weights.shape(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; b * t];
    for bi in 0..b {
        let x = &input.data()[bi * c..(bi + 1) * c];
        for ti in 0..t {
            let row = &weights.data()[ti * c..(ti + 1) * c];
            out[bi * t + ti] = bias.data()[ti] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    TensorR::new(vec![b, t], out)
}

/// Gradients of [`fc`]: `(input, weights, bias)`.
pub fn fc_backward(input: &TensorR, weights: &TensorR, grad_out: &TensorR) -> (TensorR, TensorR, TensorR) {
    let (b, c) = (input.shape()[0], input.shape()[1]);
    let t = weights.shape()[0];
    let g = grad_out.data();
    let mut gx = vec![0.0; b * c];
    let mut gw = vec![0.0; t * c];
    let mut gb = vec![0.0; t];
    for bi in 0..b {
        let x = &input.data()[bi * c..(bi + 1) * c];
        for ti in 0..t {
            let gv = g[bi * t + ti];
            gb[ti] += gv;
            for ci in 0..c {
                gw[ti * c + ci] += gv * x[ci];
                gx[bi * c + ci] += gv * weights.data()[ti * c + ci];
            }
        }
    }
    (
        TensorR::new(vec![b, c], gx).expect("fc input grad"),
        TensorR::new(vec![t, c], gw).expect("fc weight grad"),
        TensorR::new(vec![t], gb).expect("fc bias grad"),
    )
}

/// Multiplies plane `c` of batch item `b` by `mask[b, c]`.
pub fn channel_mask(input: &TensorR, mask: &TensorR) -> Result<TensorR> {
    let (b, w, h, c) = input.dims4()?;
    if mask.shape() != [b, c] {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match [{b}, {c}]",
            mask.shape()
        )));
    }
    Ok(TensorR::from_fn(input.shape(), |idx| {
        let bi = idx / (w * h * c);
        input.data()[idx] * mask.data()[bi * c + idx % c]
    }))
}

/// Fixed per-position channel mixing `[B, W, H, Cin] x [Cin, Cout]`.
pub fn channel_mix(input: &TensorR, matrix: &TensorR) -> Result<TensorR> {
    let (b, w, h, cin) = input.dims4()?;
    let (mcin, cout) = matrix.dims2()?;
    if mcin != cin {
        return Err(Error::shape("channel mixing matrix mismatch"));
    }
    let mut out = vec![0.0; b * w * h * cout];
    for (row, orow) in input.data().chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        for (ci, xv) in row.iter().enumerate() {
            for (o, m) in orow.iter_mut().zip(&matrix.data()[ci * cout..(ci + 1) * cout]) {
                *o += xv * m;
            }
        }
    }
    TensorR::new(vec![b, w, h, cout], out)
}

pub fn channel_mix_backward(input_shape: &[usize], matrix: &TensorR, grad_out: &TensorR) -> TensorR {
    let (cin, cout) = (matrix.shape()[0], matrix.shape()[1]);
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (grow, gxrow) in grad_out.data().chunks_exact(cout).zip(gx.chunks_exact_mut(cin)) {
        for (ci, d) in gxrow.iter_mut().enumerate() {
            *d = matrix.data()[ci * cout..(ci + 1) * cout]
                .iter()
                .zip(grow)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    TensorR::new(input_shape.to_vec(), gx).expect("mix grad")
}

/// Mean softmax cross-entropy of `[B, T]` logits against class labels.
/// Returns the loss and the softmax probabilities.
pub fn softmax_xent(logits: &TensorR, labels: &[usize]) -> Result<(f64, TensorR)> {
    let (b, t) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape("one label per batch item required"));
    }
    let mut probs = vec![0.0; b * t];
    let mut loss = 0.0;
    for bi in 0..b {
        if labels[bi] >= t {
            return Err(Error::arg(format!("label {} outside [0, {t})", labels[bi])));
        }
        let z = &logits.data()[bi * t..(bi + 1) * t];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        for ti in 0..t {
            probs[bi * t + ti] = (z[ti] - lse).exp();
        }
        loss += lse - z[labels[bi]];
    }
    Ok((loss / b as f64, TensorR::new(vec![b, t], probs)?))
}

pub fn softmax_xent_backward(probs: &TensorR, labels: &[usize], upstream: f64) -> TensorR {
    let (b, t) = (probs.shape()[0], probs.shape()[1]);
    TensorR::from_fn(probs.shape(), |idx| {
        let (bi, ti) = (idx / t, idx % t);
        let onehot = if labels[bi] == ti { 1.0 } else { 0.0 };
        upstream * (probs.data()[idx] - onehot) / b as f64
    })
}

/// How an over-budget AP is pulled back inside its power limit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Scale by `sqrt(P_max / power)`: Euclidean projection onto the ball.
    #[default]
    Exact,
    /// Scale by `P_max / power`, the printed form of the projection rule.
    PaperLiteral,
}

impl ProjectionMode {
    /// Multiplier applied to an AP whose current power is `power`.
    pub fn scale(self, power: f64, p_max: f64) -> f64 {
        if power <= p_max {
            return 1.0;
        }
        match self {
            ProjectionMode::Exact => (p_max / power).sqrt(),
            ProjectionMode::PaperLiteral => p_max / power,
        }
    }
}

/// Per-AP power projection on a real beam layout `[B, Q, I, 2M]`, where
/// channels `0..M` hold real parts and `M..2M` imaginary parts. The AP
/// power is the squared norm of the `(b, q)` slab. Returns scales per slab.
pub fn power_project(input: &TensorR, p_max: f64, mode: ProjectionMode) -> Result<(TensorR, Vec<f64>)> {
    let (b, q, _, _) = input.dims4()?;
    let slab = input.len() / (b * q);
    let mut out = input.clone();
    let mut scales = Vec::with_capacity(b * q);
    for chunk in out.data_mut().chunks_exact_mut(slab) {
        let power: f64 = chunk.iter().map(|v| v * v).sum();
        let s = mode.scale(power, p_max);
        if s != 1.0 {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        scales.push(s);
    }
    Ok((out, scales))
}

pub fn power_project_backward(input: &TensorR, scales: &[f64], mode: ProjectionMode, grad_out: &TensorR) -> TensorR {
    let slab = input.len() / scales.len();
    let mut gx = grad_out.clone();
    for ((x, g), (gxc, &s)) in input
        .data()
        .chunks_exact(slab)
        .zip(grad_out.data().chunks_exact(slab))
        .zip(gx.data_mut().chunks_exact_mut(slab).zip(scales))
    {
        if s == 1.0 {
            continue;
        }
        let power: f64 = x.iter().map(|v| v * v).sum();
        let gdotx: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
        // d(scale)/dx = -k * scale / power * x, k = 1 (sqrt rule) or 2 (literal rule)
        let k = match mode {
            ProjectionMode::Exact => 1.0,
            ProjectionMode::PaperLiteral => 2.0,
        };
        let coef = k * s * gdotx / power;
        for ((d, gv), xv) in gxc.iter_mut().zip(g).zip(x) {
            *d = s * gv - coef * xv;
        }
    }
    gx
}

/// Magnitudes below this contribute nothing to the entropy loss (`x ln x -> 0`).
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// `sum |x ln x|` over complex magnitudes of a real beam layout `[B, Q, I, 2M]`.
pub fn entropy(input: &TensorR) -> Result<f64> {
    let (_, _, _, c2) = input.dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::shape("beam layout needs an even channel count"));
    }
    let m = c2 / 2;
    Ok(input
        .data()
        .chunks_exact(c2)
        .flat_map(|row| (0..m).map(move |k| row[k].hypot(row[m + k])))
        .map(|x| if x < ENTROPY_FLOOR { 0.0 } else { (x * x.ln()).abs() })
        .sum())
}

pub fn entropy_backward(input: &TensorR, upstream: f64) -> TensorR {
    let c2 = input.shape()[3];
    let m = c2 / 2;
    let mut gx = TensorR::zeros(input.shape());
    for (row, grow) in input.data().chunks_exact(c2).zip(gx.data_mut().chunks_exact_mut(c2)) {
        for k in 0..m {
            let (re, im) = (row[k], row[m + k]);
            let x = re.hypot(im);
            if x < ENTROPY_FLOOR {
                continue;
            }
            let lx = x.ln();
            let df = (x * lx).signum() * (lx + 1.0);
            let df = if lx == 0.0 { 0.0 } else { df };
            grow[k] = upstream * df * re / x;
            grow[m + k] = upstream * df * im / x;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_dim_rules() {
        assert_eq!(conv_output_dim(16, 3, 1, 1).unwrap(), 16);
        assert!(matches!(conv_output_dim(4, 2, 2, 0), Ok(2)));
        assert!(matches!(conv_output_dim(5, 2, 2, 0), Err(Error::Architecture(_))));
        assert!(conv_output_dim(1, 3, 1, 0).is_err());
    }

    #[test]
    fn conv_paper_geometry_preserves_16x16() {
        let x = TensorR::filled(&[1, 16, 16, 8], 0.5);
        let k = TensorR::filled(&[3, 3, 8, 4], 0.1);
        let y = conv2d(&x, &k, &TensorR::zeros(&[4]), ConvGeometry::same3()).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 4]);
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let x = TensorR::zeros(&[2, 5, 4, 3]);
        let k = TensorR::filled(&[3, 3, 3, 2], 0.7);
        let y = conv2d(&x, &k, &TensorR::zeros(&[2]), ConvGeometry::same3()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn direct_conv_oracle(x: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, kn) = (x.len(), k.len());
        let on = n - kn + 1;
        let mut out = vec![vec![0.0; on]; on];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, o) in row.iter_mut().enumerate() {
                for i in 0..kn {
                    for j in 0..kn {
                        *o += x[r + i][c + j] * k[i][j];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let grid: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..3).map(|c| (r * 3 + c + 1) as f64).collect())
            .collect();
        let ones = vec![vec![1.0; 2]; 2];
        let expected = direct_conv_oracle(&grid, &ones);
        assert_eq!(expected, vec![vec![12.0, 16.0], vec![24.0, 28.0]]);
        let x = TensorR::from_fn(&[1, 3, 3, 1], |i| (i + 1) as f64);
        let k = TensorR::filled(&[2, 2, 1, 1], 1.0);
        let geom = ConvGeometry {
            stride: (1, 1),
            padding: (0, 0),
        };
        let y = conv2d(&x, &k, &TensorR::zeros(&[1]), geom).unwrap();
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = TensorR::zeros(&[1, 3, 3, 2]);
        let k = TensorR::zeros(&[3, 3, 1, 1]);
        assert!(matches!(
            conv2d(&x, &k, &TensorR::zeros(&[1]), ConvGeometry::same3()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bn_two_values_normalize_to_unit() {
        let x = TensorR::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (y, _) = batchnorm(
            &x,
            &TensorR::filled(&[1], 1.0),
            &TensorR::zeros(&[1]),
            BnMode::Train,
            &RunningStats::new(1),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn bn_zero_variance_channel_outputs_beta() {
        let x = TensorR::filled(&[4, 2, 2, 1], 3.3);
        let (y, saved) = batchnorm(
            &x,
            &TensorR::filled(&[1], 2.0),
            &TensorR::filled(&[1], 0.25),
            BnMode::Train,
            &RunningStats::new(1),
            1e-5,
        )
        .unwrap();
        assert!(saved.xnor.data().iter().all(|&v| v == 0.0));
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bn_running_variance_uses_unbiased_factor() {
        let mut rs = RunningStats::new(1);
        rs.accumulate(&[0.0], &[1.0], 2);
        rs.accumulate(&[2.0], &[1.0], 2);
        assert_eq!(rs.var, vec![2.0]);
        assert_eq!(rs.mean, vec![1.0]);
    }

    #[test]
    fn bn_batch_of_one_is_degenerate() {
        let x = TensorR::zeros(&[1, 2, 2, 1]);
        let r = batchnorm(
            &x,
            &TensorR::filled(&[1], 1.0),
            &TensorR::zeros(&[1]),
            BnMode::Train,
            &RunningStats::new(1),
            1e-5,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn bn_infer_requires_populated_stats() {
        let x = TensorR::zeros(&[1, 2, 2, 1]);
        let r = batchnorm(
            &x,
            &TensorR::filled(&[1], 1.0),
            &TensorR::zeros(&[1]),
            BnMode::Infer,
            &RunningStats::new(1),
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn activation_definitions() {
        let x = TensorR::new(vec![3], vec![-2.0, 3.0, 0.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 3.0, 0.0]);
        assert_eq!(activation(&x, Activation::Tanh).data()[2], 0.0);
    }

    #[test]
    fn tanh_derivative_at_zero_matches_central_difference() {
        let h: f64 = 1e-5;
        let fd = (h.tanh() - (-h).tanh()) / (2.0 * h);
        let x = TensorR::scalar(0.0);
        let y = activation(&x, Activation::Tanh);
        let g = activation_backward(&x, &y, Activation::Tanh, &TensorR::scalar(1.0));
        assert_eq!(g.data()[0], 1.0);
        assert!((fd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grl_reverses_and_scales() {
        let g = TensorR::new(vec![2], vec![0.5, -2.0]).unwrap();
        assert_eq!(grl_backward(&g, 1.0).data(), &[-0.5, 2.0]);
        assert!(grl_backward(&g, 0.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_means_and_spreads() {
        let x = TensorR::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap(&x).unwrap().data(), &[2.5]);
        let c = TensorR::filled(&[1, 3, 2, 2], 1.75);
        assert_eq!(gap(&c).unwrap().data(), &[1.75, 1.75]);
        let g = gap_backward(&[1, 2, 2, 1], &TensorR::new(vec![1, 1], vec![1.0]).unwrap());
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn fc_dot_and_identity() {
        let x = TensorR::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let w = TensorR::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(fc(&x, &w, &TensorR::zeros(&[1])).unwrap().data(), &[-1.0]);
        let eye = TensorR::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(fc(&x, &eye, &TensorR::zeros(&[2])).unwrap().data(), x.data());
        assert!(fc(&x, &TensorR::zeros(&[1, 3]), &TensorR::zeros(&[1])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_t() {
        let z = TensorR::zeros(&[1, 3]);
        let (loss, _) = softmax_xent(&z, &[1]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        let sharp = TensorR::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
        assert!(softmax_xent(&sharp, &[1]).unwrap().0 < 1e-80);
    }

    #[test]
    fn projection_scales() {
        assert_eq!(ProjectionMode::Exact.scale(0.5, 1.0), 1.0);
        assert_eq!(ProjectionMode::Exact.scale(4.0, 1.0), 0.5);
        assert_eq!(ProjectionMode::PaperLiteral.scale(4.0, 1.0), 0.25);
    }

    #[test]
    fn entropy_special_values() {
        let ones = TensorR::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(entropy(&ones).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let t = TensorR::new(vec![1, 1, 1, 2], vec![0.0, e]).unwrap();
        assert!((entropy(&t).unwrap() - e).abs() < 1e-15);
        assert_eq!(entropy(&TensorR::zeros(&[1, 2, 2, 4])).unwrap(), 0.0);
    }
}
