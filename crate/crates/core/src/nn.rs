//! Small neural-network kernels with hand-written backward passes.
//!
//! All learnable parameters of a network live in one flat `Vec<f64>`; layers
//! only remember their `ParamRange` into that buffer. This keeps optimizers,
//! checkpointing, and fingerprinting trivial, and makes every forward/backward
//! pass a pure function of `(params, inputs)` — which in turn makes training
//! and attacks bit-reproducible.
//!
//! Conventions: tensors are CHW `f64`; `backward` takes the gradient w.r.t.
//! the layer output and accumulates parameter gradients into a buffer parallel
//! to `params`, returning the input gradient only when asked (computing it for
//! the first layer of an encoder is pure waste unless an attack needs it).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{ImageShape, Tensor};

/// Half-open range into the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn slice<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive `ParamRange`s while a network is being built.
#[derive(Debug, Default)]
pub struct ParamLayout {
    next: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        ParamLayout { next: 0 }
    }

    pub fn alloc(&mut self, len: usize) -> ParamRange {
        let r = ParamRange {
            offset: self.next,
            len,
        };
        self.next += len;
        r
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

fn he_uniform(params: &mut [f64], range: ParamRange, fan_in: usize, rng: &mut impl Rng) {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    for v in range.slice_mut(params) {
        *v = rng.random_range(-bound..bound);
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution with square kernel, symmetric zero padding, and stride.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = layout.alloc(out_ch * in_ch * kernel * kernel);
        let bias = layout.alloc(out_ch);
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        he_uniform(
            params,
            self.weight,
            self.in_ch * self.kernel * self.kernel,
            rng,
        );
        for v in self.bias.slice_mut(params) {
            *v = 0.0;
        }
    }

    pub fn out_shape(&self, input: ImageShape) -> ImageShape {
        let oh = (input.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (input.width + 2 * self.pad - self.kernel) / self.stride + 1;
        ImageShape::new(self.out_ch, oh, ow)
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        let xs = x.shape();
        debug_assert_eq!(xs.channels, self.in_ch);
        let os = self.out_shape(xs);
        let mut out = Tensor::zeros(os);
        let w = self.weight.slice(params);
        let b = self.bias.slice(params);
        let (ih, iw) = (xs.height as isize, xs.width as isize);
        let xd = x.data();
        let od = out.data_mut();
        for oc in 0..self.out_ch {
            let wbase = oc * self.in_ch * self.kernel * self.kernel;
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let mut acc = b[oc];
                    let y0 = (oy * self.stride) as isize - self.pad as isize;
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    for ic in 0..self.in_ch {
                        let xc = ic * (ih as usize) * (iw as usize);
                        let wc = wbase + ic * self.kernel * self.kernel;
                        for ky in 0..self.kernel {
                            let yy = y0 + ky as isize;
                            if yy < 0 || yy >= ih {
                                continue;
                            }
                            let xrow = xc + (yy as usize) * iw as usize;
                            let wrow = wc + ky * self.kernel;
                            for kx in 0..self.kernel {
                                let xx = x0 + kx as isize;
                                if xx < 0 || xx >= iw {
                                    continue;
                                }
                                acc += w[wrow + kx] * xd[xrow + xx as usize];
                            }
                        }
                    }
                    od[(oc * os.height + oy) * os.width + ox] = acc;
                }
            }
        }
        out
    }

    /// Accumulates dL/dweight and dL/dbias into `gparams` (when given) and
    /// returns dL/dinput when `want_gx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        gout: &Tensor,
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let xs = x.shape();
        let os = gout.shape();
        let w = self.weight.slice(params);
        let (ih, iw) = (xs.height as isize, xs.width as isize);
        let xd = x.data();
        let gd = gout.data();
        let mut gx = if want_gx {
            Some(Tensor::zeros(xs))
        } else {
            None
        };
        for oc in 0..self.out_ch {
            let wbase = oc * self.in_ch * self.kernel * self.kernel;
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let g = gd[(oc * os.height + oy) * os.width + ox];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(gp) = gparams.as_deref_mut() {
                        gp[self.bias.offset + oc] += g;
                    }
                    let y0 = (oy * self.stride) as isize - self.pad as isize;
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    for ic in 0..self.in_ch {
                        let xc = ic * (ih as usize) * (iw as usize);
                        let wc = wbase + ic * self.kernel * self.kernel;
                        for ky in 0..self.kernel {
                            let yy = y0 + ky as isize;
                            if yy < 0 || yy >= ih {
                                continue;
                            }
                            let xrow = xc + (yy as usize) * iw as usize;
                            let wrow = wc + ky * self.kernel;
                            for kx in 0..self.kernel {
                                let xx = x0 + kx as isize;
                                if xx < 0 || xx >= iw {
                                    continue;
                                }
                                let xi = xrow + xx as usize;
                                if let Some(gp) = gparams.as_deref_mut() {
                                    gp[self.weight.offset + wrow + kx] += g * xd[xi];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx.data_mut()[xi] += g * w[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

/// Per-sample, per-channel normalization over spatial positions with a
/// learnable scale and shift. Stateless, so training and evaluation behave
/// identically — one less source of nondeterminism than batch statistics.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub channels: usize,
    pub gamma: ParamRange,
    pub beta: ParamRange,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(layout: &mut ParamLayout, channels: usize) -> Self {
        InstanceNorm {
            channels,
            gamma: layout.alloc(channels),
            beta: layout.alloc(channels),
            eps: 1e-5,
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        for v in self.gamma.slice_mut(params) {
            *v = 1.0;
        }
        for v in self.beta.slice_mut(params) {
            *v = 0.0;
        }
    }

    fn moments(&self, x: &Tensor, c: usize) -> (f64, f64) {
        let s = x.shape();
        let m = s.height * s.width;
        let base = c * m;
        let xd = x.data();
        let mut mean = 0.0;
        for i in 0..m {
            mean += xd[base + i];
        }
        mean /= m as f64;
        let mut var = 0.0;
        for i in 0..m {
            let d = xd[base + i] - mean;
            var += d * d;
        }
        var /= m as f64;
        (mean, var)
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        let s = x.shape();
        debug_assert_eq!(s.channels, self.channels);
        let m = s.height * s.width;
        let gamma = self.gamma.slice(params);
        let beta = self.beta.slice(params);
        let mut out = Tensor::zeros(s);
        for c in 0..self.channels {
            let (mean, var) = self.moments(x, c);
            let inv = 1.0 / libm::sqrt(var + self.eps);
            let base = c * m;
            for i in 0..m {
                let xh = (x.data()[base + i] - mean) * inv;
                out.data_mut()[base + i] = gamma[c] * xh + beta[c];
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        gout: &Tensor,
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let s = x.shape();
        let m = s.height * s.width;
        let gamma = self.gamma.slice(params);
        let mut gx = if want_gx {
            Some(Tensor::zeros(s))
        } else {
            None
        };
        for c in 0..self.channels {
            let (mean, var) = self.moments(x, c);
            let inv = 1.0 / libm::sqrt(var + self.eps);
            let base = c * m;
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..m {
                let xh = (x.data()[base + i] - mean) * inv;
                let g = gout.data()[base + i];
                sum_g += g;
                sum_gx += g * xh;
            }
            if let Some(gp) = gparams.as_deref_mut() {
                gp[self.gamma.offset + c] += sum_gx;
                gp[self.beta.offset + c] += sum_g;
            }
            if let Some(gx) = gx.as_mut() {
                let k = gamma[c] * inv;
                let mg = sum_g / m as f64;
                let mgx = sum_gx / m as f64;
                for i in 0..m {
                    let xh = (x.data()[base + i] - mean) * inv;
                    gx.data_mut()[base + i] = k * (gout.data()[base + i] - mg - xh * mgx);
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Elementwise and pooling ops
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// dL/dinput of ReLU given the layer *input* and dL/doutput.
pub fn relu_backward(x: &Tensor, gout: &Tensor) -> Tensor {
    let mut gx = gout.clone();
    for (g, v) in gx.data_mut().iter_mut().zip(x.data().iter()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + libm::exp(-*v));
    }
    out
}

/// dL/dinput of the logistic function given its *output* and dL/doutput.
pub fn sigmoid_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    let mut gx = gout.clone();
    for (g, s) in gx.data_mut().iter_mut().zip(y.data().iter()) {
        *g *= s * (1.0 - s);
    }
    gx
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the pooled map and the flat input index of each winner; ties go to
/// the first element in scan order so the choice is deterministic.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let os = ImageShape::new(s.channels, s.height / 2, s.width / 2);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0u32; os.len()];
    for c in 0..s.channels {
        for oy in 0..os.height {
            for ox in 0..os.width {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = x.idx(c, oy * 2 + dy, ox * 2 + dx);
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                let o = out.idx(c, oy, ox);
                out.data_mut()[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: ImageShape, arg: &[u32], gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (o, &i) in arg.iter().enumerate() {
        gx.data_mut()[i as usize] += gout.data()[o];
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let os = ImageShape::new(s.channels, s.height * 2, s.width * 2);
    let mut out = Tensor::zeros(os);
    for c in 0..s.channels {
        for y in 0..os.height {
            for xx in 0..os.width {
                let o = out.idx(c, y, xx);
                out.data_mut()[o] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward(input_shape: ImageShape, gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let os = gout.shape();
    for c in 0..os.channels {
        for y in 0..os.height {
            for xx in 0..os.width {
                let i = gx.idx(c, y / 2, xx / 2);
                gx.data_mut()[i] += gout.at(c, y, xx);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: layout.alloc(out_dim * in_dim),
            bias: layout.alloc(out_dim),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        he_uniform(params, self.weight, self.in_dim, rng);
        for v in self.bias.slice_mut(params) {
            *v = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = self.weight.slice(params);
        let b = self.bias.slice(params);
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        out
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        gout: &[f64],
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Vec<f64>> {
        let w = self.weight.slice(params);
        if let Some(gp) = gparams.as_deref_mut() {
            for o in 0..self.out_dim {
                gp[self.bias.offset + o] += gout[o];
                let wrow = self.weight.offset + o * self.in_dim;
                for i in 0..self.in_dim {
                    gp[wrow + i] += gout[o] * x[i];
                }
            }
        }
        if want_gx {
            let mut gx = vec![0.0; self.in_dim];
            for o in 0..self.out_dim {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                for i in 0..self.in_dim {
                    gx[i] += gout[o] * row[i];
                }
            }
            Some(gx)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Losses and softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Cross-entropy of `softmax(logits)` against a hard target. Returns the loss
/// and dL/dlogits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    debug_assert!(target < logits.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &z in logits {
        sum += libm::exp(z - max);
    }
    let lse = libm::log(sum) + max;
    let loss = lse - logits[target];
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &z) in logits.iter().enumerate() {
        let p = libm::exp(z - lse);
        grad.push(if i == target { p - 1.0 } else { p });
    }
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with optional L2 weight decay (decay is added to the gradient, as in
/// the classic formulation).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - libm::pow(self.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
    }
}
