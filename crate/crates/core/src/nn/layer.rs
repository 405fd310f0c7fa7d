//! Layers with explicit forward and backward passes.
//!
//! Activations are `NCHW` for spatial layers and `NF` for vector layers.
//! Parameters live in flat row-major vectors; each layer exposes them as an
//! ordered list of named slots, and `backward` returns parameter gradients
//! in the same slot order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::tensor::{gemm, Tensor};

/// Coarse layer family, as used by cost accounting and pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Linear,
    Pool,
    Activation,
    Norm,
    SeBlock,
    Reshape,
}

/// Shape-level description of one layer in context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub prunable: bool,
}

/// Architecture of a layer without its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    AdaptiveAvgPool {
        out: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
    },
    SqueezeExcite {
        channels: usize,
        hidden: usize,
    },
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

/// Squeeze-and-excitation gate with a residual skip:
/// `y = x + x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub hidden: usize,
    /// `[hidden, channels]`
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `[channels, hidden]`
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    Relu,
    MaxPool2d { size: usize },
    AdaptiveAvgPool2d { out: usize },
    GlobalAvgPool,
    BatchNorm2d(BatchNorm2d),
    SqueezeExcite(SqueezeExcite),
    Flatten,
}

fn he_init<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// Uniform on `+-1/sqrt(fan_in)`, the usual default for dense layers.
fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: he_init(rng, out_channels * fan_in, fan_in),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k || s == 0 {
            return Err(structural!("conv kernel {} does not fit {}x{} input", k, h, w));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    /// Weights per output filter.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(structural!("conv expects {} channels, got {}", self.in_channels, c));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let ohw = oh * ow;
        let kk = self.filter_len();
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut cols = vec![0.0; kk * ohw];
        for i in 0..n {
            self.im2col(x.item(i), h, w, oh, ow, &mut cols);
            let y = out.item_mut(i);
            for (o, b) in self.bias.iter().enumerate() {
                y[o * ohw..(o + 1) * ohw].fill(*b);
            }
            gemm(self.out_channels, kk, ohw, 1.0, &self.weight, false, &cols, false, 1.0, y);
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, gy: &Tensor, want: bool) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let (n, _, h, w) = x.dims4()?;
        let (oh, ow) = self.out_hw(h, w)?;
        let ohw = oh * ow;
        let kk = self.filter_len();
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = if want { vec![0.0; self.weight.len()] } else { Vec::new() };
        let mut db = if want { vec![0.0; self.bias.len()] } else { Vec::new() };
        let mut cols = vec![0.0; kk * ohw];
        let mut dcols = vec![0.0; kk * ohw];
        for i in 0..n {
            let g = gy.item(i);
            if want {
                self.im2col(x.item(i), h, w, oh, ow, &mut cols);
                gemm(self.out_channels, ohw, kk, 1.0, g, false, &cols, true, 1.0, &mut dw);
                for (o, d) in db.iter_mut().enumerate() {
                    *d += g[o * ohw..(o + 1) * ohw].iter().sum::<f32>();
                }
            }
            gemm(kk, self.out_channels, ohw, 1.0, &self.weight, true, g, false, 0.0, &mut dcols);
            self.col2im(&dcols, h, w, oh, ow, dx.item_mut(i));
        }
        let grads = if want { vec![dw, db] } else { Vec::new() };
        Ok((dx, grads))
    }
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: fan_in_uniform(rng, in_features * out_features, in_features),
            bias: vec![0.0; out_features],
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.in_features {
            return Err(structural!("linear expects {} features, got {}", self.in_features, f));
        }
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            out.item_mut(i).copy_from_slice(&self.bias);
        }
        gemm(
            n,
            f,
            self.out_features,
            1.0,
            x.data(),
            false,
            &self.weight,
            true,
            1.0,
            out.data_mut(),
        );
        Ok(out)
    }

    fn backward(&self, x: &Tensor, gy: &Tensor, want: bool) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let (n, f) = x.dims2()?;
        let o = self.out_features;
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(n, o, f, 1.0, gy.data(), false, &self.weight, false, 0.0, dx.data_mut());
        if !want {
            return Ok((dx, Vec::new()));
        }
        let mut dw = vec![0.0; o * f];
        gemm(o, n, f, 1.0, gy.data(), true, x.data(), false, 0.0, &mut dw);
        let mut db = vec![0.0; o];
        for i in 0..n {
            for (d, g) in db.iter_mut().zip(gy.item(i)) {
                *d += g;
            }
        }
        Ok((dx, vec![dw, db]))
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Per-channel biased mean and variance over batch and space.
    pub fn batch_stats(&self, x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                s += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m;
            let mut q = 0.0f64;
            for i in 0..n {
                q += x.item(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (q / m) as f32;
        }
        Ok((mean, var))
    }

    pub fn update_running_stats(&mut self, x: &Tensor) -> Result<()> {
        let (mean, var) = self.batch_stats(x)?;
        let mo = self.momentum;
        for ch in 0..self.channels {
            self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * mean[ch];
            self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * var[ch];
        }
        Ok(())
    }

    fn stats(&self, x: &Tensor, train: bool) -> Result<(Vec<f32>, Vec<f32>)> {
        if train {
            self.batch_stats(x)
        } else {
            Ok((self.running_mean.clone(), self.running_var.clone()))
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(structural!("batch norm expects {} channels, got {}", self.channels, c));
        }
        let (mean, var) = self.stats(x, train)?;
        let hw = h * w;
        let mut out = x.clone();
        for i in 0..n {
            let y = out.item_mut(i);
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + self.eps).sqrt();
                let (a, b) = (self.gamma[ch] * inv, self.beta[ch] - self.gamma[ch] * inv * mean[ch]);
                for v in &mut y[ch * hw..(ch + 1) * hw] {
                    *v = a * *v + b;
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        x: &Tensor,
        gy: &Tensor,
        train: bool,
        want: bool,
    ) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f32;
        let (mean, var) = self.stats(x, train)?;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + self.eps).sqrt();
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for i in 0..n {
                let xs = &x.item(i)[ch * hw..(ch + 1) * hw];
                let gs = &gy.item(i)[ch * hw..(ch + 1) * hw];
                for (&xv, &gv) in xs.iter().zip(gs) {
                    sum_g += gv;
                    sum_gx += gv * (xv - mean[ch]) * inv;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            for i in 0..n {
                let xs = &x.item(i)[ch * hw..(ch + 1) * hw];
                let gs = &gy.item(i)[ch * hw..(ch + 1) * hw];
                let ds = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                for ((d, &xv), &gv) in ds.iter_mut().zip(xs).zip(gs) {
                    *d = if train {
                        let xh = (xv - mean[ch]) * inv;
                        self.gamma[ch] * inv * (gv - sum_g / m - xh * sum_gx / m)
                    } else {
                        self.gamma[ch] * inv * gv
                    };
                }
            }
        }
        let grads = if want { vec![dgamma, dbeta] } else { Vec::new() };
        Ok((dx, grads))
    }
}

impl SqueezeExcite {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, hidden: usize) -> Self {
        SqueezeExcite {
            channels,
            hidden,
            w1: he_init(rng, hidden * channels, channels),
            b1: vec![0.0; hidden],
            w2: he_init(rng, channels * hidden, hidden),
            b2: vec![0.0; channels],
        }
    }

    /// Returns `(squeezed, hidden pre-activation, gate)` for every batch item.
    fn gate(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(structural!("SE block expects {} channels, got {}", self.channels, c));
        }
        let s = global_avg_pool(x)?;
        let mut z1 = Tensor::zeros(&[n, self.hidden]);
        for i in 0..n {
            z1.item_mut(i).copy_from_slice(&self.b1);
        }
        gemm(n, c, self.hidden, 1.0, s.data(), false, &self.w1, true, 1.0, z1.data_mut());
        let a1 = z1.map(|v| v.max(0.0));
        let mut z2 = Tensor::zeros(&[n, c]);
        for i in 0..n {
            z2.item_mut(i).copy_from_slice(&self.b2);
        }
        gemm(n, self.hidden, c, 1.0, a1.data(), false, &self.w2, true, 1.0, z2.data_mut());
        let g = z2.map(sigmoid);
        let _ = (h, w);
        Ok((s, z1, g))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (_, _, g) = self.gate(x)?;
        let hw = h * w;
        let mut out = x.clone();
        for i in 0..n {
            let gi = g.item(i).to_vec();
            let y = out.item_mut(i);
            for ch in 0..c {
                let f = 1.0 + gi[ch];
                for v in &mut y[ch * hw..(ch + 1) * hw] {
                    *v *= f;
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, gy: &Tensor, want: bool) -> Result<(Tensor, Vec<Vec<f32>>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let hid = self.hidden;
        let (s, z1, g) = self.gate(x)?;
        let a1 = z1.map(|v| v.max(0.0));
        let mut dx = Tensor::zeros(x.shape());
        // d gate, then through the sigmoid
        let mut dz2 = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let xs = x.item(i);
            let gs = gy.item(i);
            let gi = g.item(i);
            let d = dz2.item_mut(i);
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                let mut acc = 0.0;
                for ((dv, &xv), &gv) in dxi[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&gs[r]) {
                    *dv = gv * (1.0 + gi[ch]);
                    acc += gv * xv;
                }
                d[ch] = acc * gi[ch] * (1.0 - gi[ch]);
            }
        }
        let mut da1 = Tensor::zeros(&[n, hid]);
        gemm(n, c, hid, 1.0, dz2.data(), false, &self.w2, false, 0.0, da1.data_mut());
        let dz1 = da1.zip_map(&z1, |d, z| if z > 0.0 { d } else { 0.0 })?;
        let mut ds = Tensor::zeros(&[n, c]);
        gemm(n, hid, c, 1.0, dz1.data(), false, &self.w1, false, 0.0, ds.data_mut());
        for i in 0..n {
            let dsi = ds.item(i).to_vec();
            let dxi = dx.item_mut(i);
            for ch in 0..c {
                let add = dsi[ch] / hw as f32;
                for v in &mut dxi[ch * hw..(ch + 1) * hw] {
                    *v += add;
                }
            }
        }
        if !want {
            return Ok((dx, Vec::new()));
        }
        let mut dw2 = vec![0.0; c * hid];
        gemm(c, n, hid, 1.0, dz2.data(), true, a1.data(), false, 0.0, &mut dw2);
        let mut dw1 = vec![0.0; hid * c];
        gemm(hid, n, c, 1.0, dz1.data(), true, s.data(), false, 0.0, &mut dw1);
        let mut db1 = vec![0.0; hid];
        let mut db2 = vec![0.0; c];
        for i in 0..n {
            for (d, v) in db1.iter_mut().zip(dz1.item(i)) {
                *d += v;
            }
            for (d, v) in db2.iter_mut().zip(dz2.item(i)) {
                *d += v;
            }
        }
        Ok((dx, vec![dw1, db1, dw2, db2]))
    }
}

/// Per-channel spatial mean: `N x C x H x W -> N x C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let xs = x.item(i);
        let o = out.item_mut(i);
        for ch in 0..c {
            o[ch] = xs[ch * hw..(ch + 1) * hw].iter().sum::<f32>() / hw as f32;
        }
    }
    Ok(out)
}

fn bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn adaptive_avg_pool(x: &Tensor, out: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out == 0 || out > h || out > w {
        return Err(structural!("cannot pool {}x{} to {}x{}", h, w, out, out));
    }
    let mut y = Tensor::zeros(&[n, c, out, out]);
    for i in 0..n {
        let xs = x.item(i);
        let ys = y.item_mut(i);
        for ch in 0..c {
            for oy in 0..out {
                let (y0, y1) = bin(oy, h, out);
                for ox in 0..out {
                    let (x0, x1) = bin(ox, w, out);
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += xs[(ch * h + yy) * w + xx];
                        }
                    }
                    ys[(ch * out + oy) * out + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
    }
    Ok(y)
}

fn adaptive_avg_pool_backward(x: &Tensor, gy: &Tensor, out: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        let gs = gy.item(i);
        let ds = dx.item_mut(i);
        for ch in 0..c {
            for oy in 0..out {
                let (y0, y1) = bin(oy, h, out);
                for ox in 0..out {
                    let (x0, x1) = bin(ox, w, out);
                    let g = gs[(ch * out + oy) * out + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            ds[(ch * h + yy) * w + xx] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn max_pool(x: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / size, w / size);
    if oh == 0 || ow == 0 {
        return Err(structural!("max pool {} on {}x{} input", size, h, w));
    }
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for i in 0..n {
        let xs = x.item(i);
        let ys = y.item_mut(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..size {
                        for dxx in 0..size {
                            let v = xs[(ch * h + oy * size + dy) * w + ox * size + dxx];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    ys[(ch * oh + oy) * ow + ox] = m;
                }
            }
        }
    }
    Ok(y)
}

fn max_pool_backward(x: &Tensor, gy: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / size, w / size);
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        let xs = x.item(i);
        let gs = gy.item(i);
        let ds = dx.item_mut(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * size) * w + ox * size;
                    for dy in 0..size {
                        for dxx in 0..size {
                            let idx = (ch * h + oy * size + dy) * w + ox * size + dxx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    ds[best] += gs[(ch * oh + oy) * ow + ox];
                }
            }
        }
    }
    Ok(dx)
}

impl Layer {
    pub fn from_config<R: Rng + ?Sized>(cfg: &LayerConfig, rng: &mut R) -> Layer {
        match *cfg {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(rng, in_channels, out_channels, kernel, stride, padding)),
            LayerConfig::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(rng, in_features, out_features)),
            LayerConfig::Relu => Layer::Relu,
            LayerConfig::MaxPool { size } => Layer::MaxPool2d { size },
            LayerConfig::AdaptiveAvgPool { out } => Layer::AdaptiveAvgPool2d { out },
            LayerConfig::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerConfig::BatchNorm { channels } => Layer::BatchNorm2d(BatchNorm2d::new(channels)),
            LayerConfig::SqueezeExcite { channels, hidden } => {
                Layer::SqueezeExcite(SqueezeExcite::new(rng, channels, hidden))
            }
            LayerConfig::Flatten => Layer::Flatten,
        }
    }

    pub fn config(&self) -> LayerConfig {
        match self {
            Layer::Conv2d(c) => LayerConfig::Conv {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Linear(l) => LayerConfig::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
            },
            Layer::Relu => LayerConfig::Relu,
            Layer::MaxPool2d { size } => LayerConfig::MaxPool { size: *size },
            Layer::AdaptiveAvgPool2d { out } => LayerConfig::AdaptiveAvgPool { out: *out },
            Layer::GlobalAvgPool => LayerConfig::GlobalAvgPool,
            Layer::BatchNorm2d(b) => LayerConfig::BatchNorm { channels: b.channels },
            Layer::SqueezeExcite(s) => LayerConfig::SqueezeExcite {
                channels: s.channels,
                hidden: s.hidden,
            },
            Layer::Flatten => LayerConfig::Flatten,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Relu => LayerKind::Activation,
            Layer::MaxPool2d { .. } | Layer::AdaptiveAvgPool2d { .. } | Layer::GlobalAvgPool => {
                LayerKind::Pool
            }
            Layer::BatchNorm2d(_) => LayerKind::Norm,
            Layer::SqueezeExcite(_) => LayerKind::SeBlock,
            Layer::Flatten => LayerKind::Reshape,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }

    /// Per-example output shape for a per-example input shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(structural!("{:?} needs a CxHxW input, got {:?}", self.kind(), input)),
            }
        };
        match self {
            Layer::Conv2d(conv) => {
                let (c, h, w) = spatial(input)?;
                if c != conv.in_channels {
                    return Err(structural!("conv expects {} channels, got {}", conv.in_channels, c));
                }
                let (oh, ow) = conv.out_hw(h, w)?;
                Ok(vec![conv.out_channels, oh, ow])
            }
            Layer::Linear(l) => match *input {
                [f] if f == l.in_features => Ok(vec![l.out_features]),
                _ => Err(structural!("linear expects [{}], got {:?}", l.in_features, input)),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d { size } => {
                let (c, h, w) = spatial(input)?;
                if *size == 0 || h < *size || w < *size {
                    return Err(structural!("max pool {} on {}x{}", size, h, w));
                }
                Ok(vec![c, h / size, w / size])
            }
            Layer::AdaptiveAvgPool2d { out } => {
                let (c, h, w) = spatial(input)?;
                if *out == 0 || *out > h || *out > w {
                    return Err(structural!("cannot pool {}x{} to {}", h, w, out));
                }
                Ok(vec![c, *out, *out])
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = spatial(input)?;
                Ok(vec![c])
            }
            Layer::BatchNorm2d(b) => {
                let (c, _, _) = spatial(input)?;
                if c != b.channels {
                    return Err(structural!("batch norm expects {} channels, got {}", b.channels, c));
                }
                Ok(input.to_vec())
            }
            Layer::SqueezeExcite(s) => {
                let (c, _, _) = spatial(input)?;
                if c != s.channels {
                    return Err(structural!("SE expects {} channels, got {}", s.channels, c));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn spec(&self, input: &[usize]) -> Result<LayerSpec> {
        let out_shape = self.out_shape(input)?;
        let (in_channels, out_channels, kernel, stride) = match self {
            Layer::Conv2d(c) => (c.in_channels, c.out_channels, c.kernel, c.stride),
            Layer::Linear(l) => (l.in_features, l.out_features, 1, 1),
            Layer::MaxPool2d { size } => (input[0], input[0], *size, *size),
            _ => (input[0], out_shape[0], 1, 1),
        };
        Ok(LayerSpec {
            kind: self.kind(),
            in_shape: input.to_vec(),
            out_shape,
            in_channels,
            out_channels,
            kernel,
            stride,
            prunable: self.is_prunable(),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::MaxPool2d { size } => max_pool(x, *size),
            Layer::AdaptiveAvgPool2d { out } => adaptive_avg_pool(x, *out),
            Layer::GlobalAvgPool => global_avg_pool(x),
            Layer::BatchNorm2d(b) => b.forward(x, train),
            Layer::SqueezeExcite(s) => s.forward(x),
            Layer::Flatten => Ok(x.clone().flatten()),
        }
    }

    /// Gradient with respect to the input and, when `want_params` is set,
    /// with respect to each parameter slot.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        train: bool,
        want_params: bool,
    ) -> Result<(Tensor, Vec<Vec<f32>>)> {
        match self {
            Layer::Conv2d(c) => c.backward(x, grad_out, want_params),
            Layer::Linear(l) => l.backward(x, grad_out, want_params),
            Layer::Relu => Ok((x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })?, Vec::new())),
            Layer::MaxPool2d { size } => Ok((max_pool_backward(x, grad_out, *size)?, Vec::new())),
            Layer::AdaptiveAvgPool2d { out } => {
                Ok((adaptive_avg_pool_backward(x, grad_out, *out)?, Vec::new()))
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..n {
                    let g = grad_out.item(i).to_vec();
                    let d = dx.item_mut(i);
                    for ch in 0..c {
                        d[ch * hw..(ch + 1) * hw].fill(g[ch] / hw as f32);
                    }
                }
                Ok((dx, Vec::new()))
            }
            Layer::BatchNorm2d(b) => b.backward(x, grad_out, train, want_params),
            Layer::SqueezeExcite(s) => s.backward(x, grad_out, want_params),
            Layer::Flatten => Ok((grad_out.clone().reshape(x.shape())?, Vec::new())),
        }
    }

    /// Named parameter slots with their shapes.
    pub fn params(&self) -> Vec<(&'static str, &[f32], Vec<usize>)> {
        match self {
            Layer::Conv2d(c) => vec![
                (
                    "weight",
                    &c.weight[..],
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                ),
                ("bias", &c.bias[..], vec![c.out_channels]),
            ],
            Layer::Linear(l) => vec![
                ("weight", &l.weight[..], vec![l.out_features, l.in_features]),
                ("bias", &l.bias[..], vec![l.out_features]),
            ],
            Layer::BatchNorm2d(b) => vec![
                ("gamma", &b.gamma[..], vec![b.channels]),
                ("beta", &b.beta[..], vec![b.channels]),
            ],
            Layer::SqueezeExcite(s) => vec![
                ("w1", &s.w1[..], vec![s.hidden, s.channels]),
                ("b1", &s.b1[..], vec![s.hidden]),
                ("w2", &s.w2[..], vec![s.channels, s.hidden]),
                ("b2", &s.b2[..], vec![s.channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<(&'static str, &[f32])> {
        match self {
            Layer::BatchNorm2d(b) => vec![
                ("running_mean", &b.running_mean[..]),
                ("running_var", &b.running_var[..]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::SqueezeExcite(s) => vec![&mut s.w1, &mut s.b1, &mut s.w2, &mut s.b2],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::BatchNorm2d(b) => vec![&mut b.running_mean, &mut b.running_var],
            _ => Vec::new(),
        }
    }
}
