use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, Param};
use crate::tensor::{gemm, Tensor};

fn kaiming<R: Rng + ?Sized>(len: usize, fan_in: usize, gain: f32, rng: &mut R) -> Vec<f32> {
    let std = gain / (fan_in as f32).sqrt();
    Tensor::randn(&[len], std, rng).into_data()
}

/// Fully connected layer; inputs are flattened to `N x in_features`.
pub struct Linear {
    pub weight: Param, // out x in
    pub bias: Param,
    in_features: usize,
    out_features: usize,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self::with_gain(in_features, out_features, 2f32.sqrt(), rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(in_features: usize, out_features: usize, gain: f32, rng: &mut R) -> Self {
        Self {
            weight: Param::new(kaiming(in_features * out_features, in_features, gain, rng)),
            bias: Param::new(vec![0.0; out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// Sets the weight to the identity (requires a square layer) and the bias to zero.
    pub fn set_identity(&mut self) {
        assert_eq!(self.in_features, self.out_features);
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.in_features {
            self.weight.value[i * self.in_features + i] = 1.0;
        }
        self.bias.value.iter_mut().for_each(|v| *v = 0.0);
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(
            x.sample_len(),
            self.in_features,
            "linear expects {} input features",
            self.in_features
        );
        let mut y = Tensor::zeros(&[n, self.out_features]);
        {
            let yd = y.data_mut();
            for i in 0..n {
                yd[i * self.out_features..(i + 1) * self.out_features].copy_from_slice(&self.bias.value);
            }
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            1.0,
            x.data(),
            (self.in_features, 1),
            &self.weight.value,
            (1, self.in_features),
            1.0,
            y.data_mut(),
            (self.out_features, 1),
        );
        y
    }
}

impl Layer for Linear {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.compute(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        if self.weight.trainable {
            gemm(
                fo,
                n,
                fi,
                1.0,
                grad.data(),
                (1, fo),
                x.data(),
                (fi, 1),
                1.0,
                &mut self.weight.grad,
                (fi, 1),
            );
        }
        if self.bias.trainable {
            for i in 0..n {
                for (b, g) in self.bias.grad.iter_mut().zip(&grad.data()[i * fo..(i + 1) * fo]) {
                    *b += g;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            fo,
            fi,
            1.0,
            grad.data(),
            (fo, 1),
            &self.weight.value,
            (fi, 1),
            0.0,
            dx.data_mut(),
            (fi, 1),
        );
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel 2-D convolution over `N x C x H x W`, zero padding `kernel / 2`.
pub struct Conv2d {
    pub weight: Param, // out x in x k x k
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<Tensor>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Upper bound on im2col buffer entries; batches are processed in chunks
/// of samples that fit.
const COL_BUDGET: usize = 1 << 20;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(kaiming(out_channels * fan_in, fan_in, 2f32.sqrt(), rng)),
            bias: Param::new(vec![0.0; out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn zero_weights(&mut self) {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
    }

    fn geometry(&self, shape: &[usize]) -> Geometry {
        assert_eq!(shape.len(), 4, "conv2d expects N x C x H x W");
        assert_eq!(shape[1], self.in_channels, "conv2d channel mismatch");
        let (h, w) = (shape[2], shape[3]);
        Geometry {
            c: shape[1],
            h,
            w,
            ho: (h + 2 * self.pad - self.kernel) / self.stride + 1,
            wo: (w + 2 * self.pad - self.kernel) / self.stride + 1,
        }
    }

    fn chunk_len(&self, g: &Geometry) -> usize {
        (COL_BUDGET / (g.c * self.kernel * self.kernel * g.ho * g.wo)).max(1)
    }

    /// Output columns `ox0..ox1` whose input column `ox * stride + kx - pad`
    /// lies inside a row of width `w`, plus the input column of `ox0`.
    fn valid_range(&self, kx: usize, w: usize, wo: usize) -> (usize, usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let ox0 = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let ox1 = if w + pad <= kx {
            0
        } else {
            ((w - 1 + pad - kx) / s + 1).min(wo)
        };
        let ox1 = ox1.max(ox0);
        (ox0, ox1, (ox0 * s + kx).saturating_sub(pad))
    }

    /// Column matrix `(C k k) x (nb P)` for the `nb` samples in `x`.
    fn im2col(&self, x: &[f32], nb: usize, g: &Geometry, col: &mut Vec<f32>) {
        let k = self.kernel;
        let s = self.stride;
        let p = g.ho * g.wo;
        let np = nb * p;
        col.clear();
        col.resize(g.c * k * k * np, 0.0);
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let (ox0, ox1, ix0) = self.valid_range(kx, g.w, g.wo);
                    let len = ox1 - ox0;
                    if len == 0 {
                        continue;
                    }
                    let row = ((ci * k + ky) * k + kx) * np;
                    for b in 0..nb {
                        let src = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                        let dst = &mut col[row + b * p..row + (b + 1) * p];
                        for oy in 0..g.ho {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                            let drow = &mut dst[oy * g.wo + ox0..oy * g.wo + ox1];
                            if s == 1 {
                                drow.copy_from_slice(&srow[ix0..ix0 + len]);
                            } else {
                                for (d, v) in drow.iter_mut().zip(srow[ix0..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds the column gradient back onto `x` (the `nb` samples of a chunk).
    fn col2im(&self, col: &[f32], nb: usize, g: &Geometry, x: &mut [f32]) {
        let k = self.kernel;
        let s = self.stride;
        let p = g.ho * g.wo;
        let np = nb * p;
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let (ox0, ox1, ix0) = self.valid_range(kx, g.w, g.wo);
                    let len = ox1 - ox0;
                    if len == 0 {
                        continue;
                    }
                    let row = ((ci * k + ky) * k + kx) * np;
                    for b in 0..nb {
                        let off = (b * g.c + ci) * g.h * g.w;
                        let src = &col[row + b * p..row + (b + 1) * p];
                        for oy in 0..g.ho {
                            let iy = (oy * s + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = &mut x[off + iy as usize * g.w..off + (iy as usize + 1) * g.w];
                            let srow = &src[oy * g.wo + ox0..oy * g.wo + ox1];
                            if s == 1 {
                                for (d, v) in xrow[ix0..ix0 + len].iter_mut().zip(srow) {
                                    *d += v;
                                }
                            } else {
                                for (d, v) in xrow[ix0..].iter_mut().step_by(s).zip(srow) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x.shape());
        let n = x.batch();
        let p = g.ho * g.wo;
        let ckk = g.c * self.kernel * self.kernel;
        let co_n = self.out_channels;
        let in_len = g.c * g.h * g.w;
        let mut y = Tensor::zeros(&[n, co_n, g.ho, g.wo]);
        let chunk = self.chunk_len(&g);
        let mut col = Vec::new();
        let mut ycol = Vec::new();
        for b0 in (0..n).step_by(chunk) {
            let nb = chunk.min(n - b0);
            let np = nb * p;
            self.im2col(&x.data()[b0 * in_len..(b0 + nb) * in_len], nb, &g, &mut col);
            ycol.clear();
            ycol.resize(co_n * np, 0.0);
            gemm(
                co_n,
                ckk,
                np,
                1.0,
                &self.weight.value,
                (ckk, 1),
                &col,
                (np, 1),
                0.0,
                &mut ycol,
                (np, 1),
            );
            let yd = &mut y.data_mut()[b0 * co_n * p..(b0 + nb) * co_n * p];
            for co in 0..co_n {
                let bias = self.bias.value[co];
                for b in 0..nb {
                    let src = &ycol[co * np + b * p..co * np + (b + 1) * p];
                    let dst = &mut yd[(b * co_n + co) * p..(b * co_n + co + 1) * p];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        }
        y
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv2d backward without forward");
        let g = self.geometry(x.shape());
        let n = x.batch();
        let p = g.ho * g.wo;
        let co_n = self.out_channels;
        let ckk = g.c * self.kernel * self.kernel;
        let in_len = g.c * g.h * g.w;
        let gd = grad.data();
        if self.bias.trainable {
            for b in 0..n {
                for co in 0..co_n {
                    self.bias.grad[co] += gd[(b * co_n + co) * p..(b * co_n + co + 1) * p].iter().sum::<f32>();
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        let chunk = self.chunk_len(&g);
        let (mut col, mut gcol, mut dcol) = (Vec::new(), Vec::new(), Vec::new());
        for b0 in (0..n).step_by(chunk) {
            let nb = chunk.min(n - b0);
            let np = nb * p;
            gcol.clear();
            gcol.resize(co_n * np, 0.0);
            for co in 0..co_n {
                for b in 0..nb {
                    let bi = b0 + b;
                    gcol[co * np + b * p..co * np + (b + 1) * p]
                        .copy_from_slice(&gd[(bi * co_n + co) * p..(bi * co_n + co + 1) * p]);
                }
            }
            if self.weight.trainable {
                self.im2col(&x.data()[b0 * in_len..(b0 + nb) * in_len], nb, &g, &mut col);
                gemm(
                    co_n,
                    np,
                    ckk,
                    1.0,
                    &gcol,
                    (np, 1),
                    &col,
                    (1, np),
                    1.0,
                    &mut self.weight.grad,
                    (ckk, 1),
                );
            }
            dcol.clear();
            dcol.resize(ckk * np, 0.0);
            gemm(
                ckk,
                co_n,
                np,
                1.0,
                &self.weight.value,
                (1, ckk),
                &gcol,
                (np, 1),
                0.0,
                &mut dcol,
                (np, 1),
            );
            self.col2im(&dcol, nb, &g, &mut dx.data_mut()[b0 * in_len..(b0 + nb) * in_len]);
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Group normalization with per-channel affine. A 2-D `N x F` input is treated
/// as `F` channels of spatial size 1, so `groups = 1` gives layer norm.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    groups: usize,
    channels: usize,
    eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(
            groups >= 1 && channels.is_multiple_of(groups),
            "channels must divide into groups"
        );
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            groups,
            channels,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn layer_norm(features: usize) -> Self {
        Self::new(1, features)
    }

    fn compute(&self, x: &Tensor) -> (Tensor, Vec<f32>, Vec<f32>) {
        let n = x.batch();
        assert_eq!(x.shape()[1], self.channels, "group norm channel mismatch");
        let spatial = x.sample_len() / self.channels;
        let per_group = self.channels / self.groups * spatial;
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_stds = vec![0.0f32; n * self.groups];
        let xd = x.data();
        let yd = y.data_mut();
        for b in 0..n {
            for gi in 0..self.groups {
                let start = (b * self.groups + gi) * per_group;
                let seg = &xd[start..start + per_group];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
                let inv = 1.0 / (var + self.eps as f64).sqrt();
                inv_stds[b * self.groups + gi] = inv as f32;
                for (i, &v) in seg.iter().enumerate() {
                    let c = gi * (self.channels / self.groups) + i / spatial;
                    let h = ((v as f64 - mean) * inv) as f32;
                    xhat[start + i] = h;
                    yd[start + i] = self.gamma.value[c] * h + self.beta.value[c];
                }
            }
        }
        (y, xhat, inv_stds)
    }
}

impl Layer for GroupNorm {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.compute(x).0
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (y, xhat, inv) = self.compute(x);
        self.cache = Some((xhat, inv));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("group norm backward without forward");
        let n = grad.batch();
        let spatial = grad.sample_len() / self.channels;
        let cpg = self.channels / self.groups;
        let per_group = cpg * spatial;
        let gd = grad.data();
        let mut dx = Tensor::zeros(grad.shape());
        let dxd = dx.data_mut();
        let m = per_group as f32;
        for b in 0..n {
            for gi in 0..self.groups {
                let start = (b * self.groups + gi) * per_group;
                let inv = inv_stds[b * self.groups + gi];
                let mut sum_d = 0.0f32;
                let mut sum_dx = 0.0f32;
                for i in 0..per_group {
                    let c = gi * cpg + i / spatial;
                    let g = gd[start + i];
                    let h = xhat[start + i];
                    if self.gamma.trainable {
                        self.gamma.grad[c] += g * h;
                    }
                    if self.beta.trainable {
                        self.beta.grad[c] += g;
                    }
                    let dh = g * self.gamma.value[c];
                    sum_d += dh;
                    sum_dx += dh * h;
                }
                for i in 0..per_group {
                    let c = gi * cpg + i / spatial;
                    let dh = gd[start + i] * self.gamma.value[c];
                    dxd[start + i] = inv / m * (m * dh - sum_d - xhat[start + i] * sum_dx);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch normalization over the rows of an `N x F` input. Training uses batch
/// statistics; `infer` uses the running averages, which are stored as frozen
/// parameters so they travel with checkpoints.
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        let frozen = |v: f32| {
            let mut p = Param::new(vec![v; features]);
            p.trainable = false;
            p
        };
        Self {
            gamma: Param::new(vec![1.0; features]),
            beta: Param::new(vec![0.0; features]),
            running_mean: frozen(0.0),
            running_var: frozen(1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn features(&self, x: &Tensor) -> usize {
        assert_eq!(x.shape().len(), 2, "batch norm expects N x F");
        assert_eq!(x.shape()[1], self.gamma.len(), "batch norm feature mismatch");
        self.gamma.len()
    }
}

impl Layer for BatchNorm {
    fn infer(&self, x: &Tensor) -> Tensor {
        let f = self.features(x);
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                let inv = 1.0 / (self.running_var.value[j] + self.eps).sqrt();
                *v = self.gamma.value[j] * (*v - self.running_mean.value[j]) * inv + self.beta.value[j];
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let f = self.features(x);
        let n = x.batch();
        let mut mean = vec![0.0f64; f];
        let mut var = vec![0.0f64; f];
        for row in x.data().chunks(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64 / n as f64;
            }
        }
        for row in x.data().chunks(f) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n as f64;
            }
        }
        let inv: Vec<f32> = var
            .iter()
            .map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
            .collect();
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.len()];
        for (row, hrow) in y.data_mut().chunks_mut(f).zip(xhat.chunks_mut(f)) {
            for j in 0..f {
                let h = (row[j] - mean[j] as f32) * inv[j];
                hrow[j] = h;
                row[j] = self.gamma.value[j] * h + self.beta.value[j];
            }
        }
        let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let k = self.momentum;
        for j in 0..f {
            let rm = &mut self.running_mean.value[j];
            *rm = (1.0 - k) * *rm + k * mean[j] as f32;
            let rv = &mut self.running_var.value[j];
            *rv = (1.0 - k) * *rv + k * (var[j] * unbiased) as f32;
        }
        self.cache = Some((xhat, inv));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv) = self.cache.take().expect("batch norm backward without forward");
        let f = inv.len();
        let m = grad.batch() as f32;
        let mut sum_d = vec![0.0f32; f];
        let mut sum_dx = vec![0.0f32; f];
        for (g, h) in grad.data().chunks(f).zip(xhat.chunks(f)) {
            for j in 0..f {
                if self.gamma.trainable {
                    self.gamma.grad[j] += g[j] * h[j];
                }
                if self.beta.trainable {
                    self.beta.grad[j] += g[j];
                }
                let dh = g[j] * self.gamma.value[j];
                sum_d[j] += dh;
                sum_dx[j] += dh * h[j];
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for ((d, g), h) in dx
            .data_mut()
            .chunks_mut(f)
            .zip(grad.data().chunks(f))
            .zip(xhat.chunks(f))
        {
            for j in 0..f {
                let dh = g[j] * self.gamma.value[j];
                d[j] = inv[j] / m * (m * dh - sum_d[j] - h[j] * sum_dx[j]);
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Act {
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Act::Identity => v,
            Act::Relu => v.max(0.0),
            Act::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    0.2 * v
                }
            }
            Act::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed in terms of the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Act::Identity => 1.0,
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
            Act::Tanh => 1.0 - y * y,
        }
    }
}

pub struct ActLayer {
    act: Act,
    cache: Option<(Tensor, Tensor)>,
}

impl ActLayer {
    pub fn new(act: Act) -> Self {
        Self { act, cache: None }
    }
}

impl Layer for ActLayer {
    fn infer(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.act.apply(v))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.cache = Some((x.clone(), y.clone()));
        y
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, y) = self.cache.take().expect("activation backward without forward");
        let data = grad
            .data()
            .iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(g, (&xv, &yv))| g * self.act.derivative(xv, yv))
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }
}

/// Nearest-neighbour 2x spatial upsampling.
#[derive(Default)]
pub struct Upsample2x {
    in_shape: Option<Vec<usize>>,
}

impl Upsample2x {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Upsample2x {
    fn infer(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut y = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
        let xd = x.data();
        let yd = y.data_mut();
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    yd[p * 4 * h * w + i * 2 * w + j] = xd[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        y
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.in_shape.take().expect("upsample backward without forward");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut dx = Tensor::zeros(&s);
        let gd = grad.data();
        let dd = dx.data_mut();
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dd[p * h * w + (i / 2) * w + j / 2] += gd[p * 4 * h * w + i * 2 * w + j];
                }
            }
        }
        dx
    }
}

/// Spatial mean: `N x C x H x W -> N x C`.
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &Tensor) -> Tensor {
        crate::features::pool(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.in_shape.take().expect("pool backward without forward");
        crate::features::pool_backward(grad, &s)
    }
}

/// Reshapes the per-sample part of a tensor.
pub struct Reshape {
    to: Vec<usize>,
    in_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(per_sample: &[usize]) -> Self {
        Self {
            to: per_sample.to_vec(),
            in_shape: None,
        }
    }
}

impl Layer for Reshape {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.to);
        x.clone().reshape(&shape)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.in_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let s = self.in_shape.take().expect("reshape backward without forward");
        grad.clone().reshape(&s)
    }
}

/// Appends one channel holding the batch-average of per-feature standard
/// deviations across the batch, so the discriminator can see sample diversity.
#[derive(Default)]
pub struct MinibatchStd {
    cache: Option<(Tensor, Vec<f32>, Vec<f32>)>,
}

const MBSTD_EPS: f32 = 1e-8;

impl MinibatchStd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Per-feature means and stds, and their average std.
    fn stats(x: &Tensor) -> (Vec<f32>, Vec<f32>, f32) {
        let (n, k) = (x.batch(), x.sample_len());
        let mut mean = vec![0.0f32; k];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.sample(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f32);
        let mut var = vec![0.0f32; k];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.sample(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f32> = var.iter().map(|v| (v / n as f32 + MBSTD_EPS).sqrt()).collect();
        let avg = std.iter().sum::<f32>() / k as f32;
        (mean, std, avg)
    }
}

impl Layer for MinibatchStd {
    fn infer(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let (_, _, avg) = Self::stats(x);
        let mut out = Vec::with_capacity(n * (c + 1) * hw);
        for i in 0..n {
            out.extend_from_slice(x.sample(i));
            out.extend(std::iter::repeat_n(avg, hw));
        }
        Tensor::from_vec(&[n, c + 1, s[2], s[3]], out)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (mean, std, _) = Self::stats(x);
        self.cache = Some((x.clone(), mean, std));
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, mean, std) = self.cache.take().expect("minibatch-std backward without forward");
        let (n, k) = (x.batch(), x.sample_len());
        let extra: f32 = (0..n).map(|i| grad.sample(i)[k..].iter().sum::<f32>()).sum();
        let scale = extra / (n * k) as f32;
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let (g, xi) = (&grad.sample(i)[..k], x.sample(i));
            for (j, d) in dx.sample_mut(i).iter_mut().enumerate() {
                *d = g[j] + scale * (xi[j] - mean[j]) / std[j];
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut l = Linear::new(5, 4, &mut r);
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        check_layer(&mut l, &x, 1e-2);
    }

    #[test]
    fn conv_gradients_stride_one_and_two() {
        let mut r = rng();
        for stride in [1, 2] {
            let mut c = Conv2d::new(2, 3, 3, stride, &mut r);
            let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
            check_layer(&mut c, &x, 1e-2);
        }
        let mut c = Conv2d::new(3, 2, 1, 2, &mut r);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        check_layer(&mut c, &x, 1e-2);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let c = Conv2d::new(2, 2, 3, 2, &mut r);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let y = c.infer(&x);
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = c.bias.value[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                    continue;
                                }
                                acc += c.weight.value[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                    let got = y.data()[(co * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn chunked_conv_matches_per_sample() {
        let mut r = rng();
        let mut c = Conv2d::new(16, 4, 3, 1, &mut r);
        let n = 60;
        let x = Tensor::randn(&[n, 16, 16, 16], 1.0, &mut r);
        assert!(c.chunk_len(&c.geometry(x.shape())) < n);
        let y = c.forward(&x);
        let g = Tensor::randn(y.shape(), 1.0, &mut r);
        let dx = c.backward(&g);
        let wgrad = c.weight.grad.clone();

        let mut wsum = vec![0.0f32; wgrad.len()];
        for i in 0..n {
            c.weight.grad.iter_mut().for_each(|v| *v = 0.0);
            let xi = Tensor::from_vec(&[1, 16, 16, 16], x.sample(i).to_vec());
            let yi = c.forward(&xi);
            let gi = Tensor::from_vec(yi.shape(), g.sample(i).to_vec());
            let dxi = c.backward(&gi);
            for (a, b) in yi.data().iter().zip(y.sample(i)) {
                assert!((a - b).abs() < 1e-4);
            }
            for (a, b) in dxi.data().iter().zip(dx.sample(i)) {
                assert!((a - b).abs() < 1e-4);
            }
            wsum.iter_mut().zip(&c.weight.grad).for_each(|(s, v)| *s += v);
        }
        for (a, b) in wsum.iter().zip(&wgrad) {
            assert!((a - b).abs() < 1e-2 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut r = rng();
        let mut g = GroupNorm::new(2, 4);
        for v in g.gamma.value.iter_mut() {
            *v = 0.5 + r.random::<f32>();
        }
        let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
        check_layer(&mut g, &x, 2e-2);
        let mut ln = GroupNorm::layer_norm(6);
        let x = Tensor::randn(&[3, 6], 1.0, &mut r);
        check_layer(&mut ln, &x, 2e-2);
    }

    #[test]
    fn batch_norm_gradients_and_running_stats() {
        let mut r = rng();
        let mut bn = BatchNorm::new(3);
        for v in bn.gamma.value.iter_mut() {
            *v = 0.5 + r.random::<f32>();
        }
        // Training-mode outputs depend on the whole batch, so the numeric
        // side goes through `forward` rather than `infer`.
        let x = Tensor::randn(&[5, 3], 2.0, &mut r);
        let w = Tensor::randn(&[5, 3], 1.0, &mut r);
        let loss = |bn: &mut BatchNorm, x: &Tensor| -> f64 {
            bn.forward(x)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| (*a * *b) as f64)
                .sum()
        };
        loss(&mut bn, &x);
        let dx = bn.backward(&w);
        let h = 1e-2;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h as f64);
            let ana = dx.data()[i] as f64;
            assert!((num - ana).abs() <= 2e-2 * (1.0 + num.abs()), "dx[{i}]: {num} vs {ana}");
        }
        for j in 0..3 {
            bn.gamma.value[j] += h;
            let lp = loss(&mut bn, &x);
            bn.gamma.value[j] -= 2.0 * h;
            let lm = loss(&mut bn, &x);
            bn.gamma.value[j] += h;
            let num = (lp - lm) / (2.0 * h as f64);
            let ana = bn.gamma.grad[j] as f64;
            assert!(
                (num - ana).abs() <= 2e-2 * (1.0 + num.abs()),
                "dgamma[{j}]: {num} vs {ana}"
            );
        }

        let mut bn = BatchNorm::new(3);
        let x = Tensor::randn(&[400, 3], 2.0, &mut r).map(|v| v + 3.0);
        for _ in 0..200 {
            bn.forward(&x);
        }
        let y = bn.infer(&x);
        let col = |j: usize| y.data().iter().skip(j).step_by(3).copied().collect::<Vec<f32>>();
        for j in 0..3 {
            let c = col(j);
            let mean = c.iter().sum::<f32>() / c.len() as f32;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / c.len() as f32;
            assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-2, "{mean} {var}");
        }
    }

    #[test]
    fn smooth_activations_and_resampling_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r);
        check_layer(&mut ActLayer::new(Act::Tanh), &x, 1e-2);
        check_layer(&mut Upsample2x::new(), &x, 1e-2);
        check_layer(&mut GlobalAvgPool::new(), &x, 1e-2);
        check_layer(&mut MinibatchStd::new(), &x, 2e-2);
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut r = rng();
        let mut l = Linear::new(4, 4, &mut r);
        l.set_identity();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(l.infer(&x), x);
    }
}
