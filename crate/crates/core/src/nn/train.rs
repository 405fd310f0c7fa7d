//! Classifier training, augmentation and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, ParamGrads};
use crate::data::LabeledDataset;
use crate::error::{domain, structural, Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer settings: SGD with momentum or Adam, L2 weight
/// decay, and per-epoch exponential decay of the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub method: Method,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Multiplier applied to the learning rate after every epoch.
    pub decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            method: Method::Sgd,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            decay: 0.95,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    lr: f32,
    velocity: std::collections::HashMap<usize, Vec<f32>>,
    second: std::collections::HashMap<usize, (u32, Vec<f32>)>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            lr: cfg.lr,
            cfg,
            velocity: Default::default(),
            second: Default::default(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Updates one parameter slot; `key` identifies its momentum buffer.
    pub fn update(&mut self, key: usize, param: &mut [f32], grad: &[f32]) {
        let v = self.velocity.entry(key).or_insert_with(|| vec![0.0; param.len()]);
        let (mu, wd, lr) = (self.cfg.momentum, self.cfg.weight_decay, self.lr);
        match self.cfg.method {
            Method::Sgd => {
                for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
                    let g = g + wd * *p;
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
            Method::Adam => {
                const B2: f32 = 0.999;
                let (t, s) = self.second.entry(key).or_insert_with(|| (0, vec![0.0; param.len()]));
                *t += 1;
                let c1 = 1.0 - mu.powi(*t as i32);
                let c2 = 1.0 - B2.powi(*t as i32);
                for (((p, &g), v), s) in param.iter_mut().zip(grad).zip(v.iter_mut()).zip(s.iter_mut()) {
                    let g = g + wd * *p;
                    *v = mu * *v + (1.0 - mu) * g;
                    *s = B2 * *s + (1.0 - B2) * g * g;
                    *p -= lr * (*v / c1) / ((*s / c2).sqrt() + 1e-8);
                }
            }
        }
    }

    /// Applies gradients for every layer with non-empty slot gradients.
    pub fn step_network(&mut self, net: &mut Network, grads: &ParamGrads) {
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            for (s, p) in layer.params_mut().into_iter().enumerate() {
                if let Some(g) = grads[i].get(s) {
                    self.update(i * 16 + s, p, g);
                }
            }
        }
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.cfg.decay;
    }
}

/// Softmax cross-entropy with label smoothing, averaged over the batch.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f32) -> Result<(f32, Tensor)> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() {
        return Err(structural!("{} logits rows for {} labels", n, labels.len()));
    }
    if n == 0 {
        return Err(domain!("cross entropy of an empty batch"));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.item(i);
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln() + m;
        let g = grad.item_mut(i);
        for j in 0..k {
            let q = smoothing / k as f32 + if j == labels[i] { 1.0 - smoothing } else { 0.0 };
            let p = (row[j] - lz).exp();
            loss -= (q * (row[j] - lz)) as f64;
            g[j] = (p - q) / n as f32;
        }
    }
    Ok(((loss / n as f64) as f32, grad))
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    /// Probability of a random perspective warp.
    pub perspective_p: f32,
    /// Maximum corner displacement as a fraction of half the image size.
    pub perspective_scale: f32,
    /// Contrast and per-channel offset jitter amplitude.
    pub jitter: f32,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            crop_pad: 2,
            flip: true,
            perspective_p: 0.2,
            perspective_scale: 0.2,
            jitter: 0.1,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Augment {
            crop_pad: 0,
            flip: false,
            perspective_p: 0.0,
            perspective_scale: 0.0,
            jitter: 0.0,
        }
    }

    /// Augments one normalized `C x H x W` image in place.
    pub fn apply<R: Rng + ?Sized>(&self, img: &mut [f32], c: usize, h: usize, w: usize, rng: &mut R) {
        if self.perspective_p > 0.0 && rng.random::<f32>() < self.perspective_p {
            perspective(img, c, h, w, self.perspective_scale, rng);
        }
        if self.crop_pad > 0 {
            let p = self.crop_pad as i64;
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            shift(img, c, h, w, dy, dx);
        }
        if self.flip && rng.random_bool(0.5) {
            for ch in 0..c {
                for y in 0..h {
                    img[(ch * h + y) * w..(ch * h + y + 1) * w].reverse();
                }
            }
        }
        if self.jitter > 0.0 {
            let contrast = 1.0 + rng.random_range(-self.jitter..self.jitter);
            for ch in 0..c {
                let offset = rng.random_range(-self.jitter..self.jitter);
                for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                    *v = *v * contrast + offset;
                }
            }
        }
    }
}

/// Translation with zero fill, equivalent to a padded random crop.
fn shift(img: &mut [f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                img[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Homography taking each `src` corner to the matching `dst` corner.
pub fn solve_homography(src: [[f64; 2]; 4], dst: [[f64; 2]; 4]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    Some(h)
}

fn perspective<R: Rng + ?Sized>(img: &mut [f32], c: usize, h: usize, w: usize, scale: f32, rng: &mut R) {
    let (fw, fh) = (w as f64 - 1.0, h as f64 - 1.0);
    let corners = [[0.0, 0.0], [fw, 0.0], [fw, fh], [0.0, fh]];
    let (mx, my) = (scale as f64 * fw / 2.0, scale as f64 * fh / 2.0);
    let mut moved = corners;
    for (k, p) in moved.iter_mut().enumerate() {
        let sx = if k == 0 || k == 3 { 1.0 } else { -1.0 };
        let sy = if k < 2 { 1.0 } else { -1.0 };
        p[0] += sx * rng.random_range(0.0..=mx);
        p[1] += sy * rng.random_range(0.0..=my);
    }
    // output pixel -> source pixel
    let Some(hm) = solve_homography(moved, corners) else { return };
    let src = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let d = hm[6] * xf + hm[7] * yf + hm[8];
            let sx = (hm[0] * xf + hm[1] * yf + hm[2]) / d;
            let sy = (hm[3] * xf + hm[4] * yf + hm[5]) / d;
            for ch in 0..c {
                img[(ch * h + y) * w + x] = bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, sy, sx);
            }
        }
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1.0) * fx * (1.0 - fy)
        + at(y0 + 1.0, x0) * (1.0 - fx) * fy
        + at(y0 + 1.0, x0 + 1.0) * fx * fy
}

/// Augmented batch for the given indices.
pub fn augmented_batch<R: Rng + ?Sized>(
    data: &LabeledDataset,
    indices: &[usize],
    aug: &Augment,
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let (mut x, labels) = data.batch(indices);
    let [c, h, w] = data.image_shape();
    for i in 0..indices.len() {
        aug.apply(x.item_mut(i), c, h, w, rng);
    }
    (x, labels)
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub label_smoothing: f32,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.02,
                ..Default::default()
            },
            label_smoothing: 0.1,
            augment: Augment::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f32,
    pub train_accuracy: f64,
}

/// Trains every parameter of `net` with cross-entropy. `gate` may edit the
/// per-layer gradients before each update (e.g. to freeze masked weights).
pub fn train_classifier(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut gate: impl FnMut(usize, &mut Vec<Vec<f32>>),
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(domain!("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = augmented_batch(data, chunk, &cfg.augment, &mut rng);
            let trace = net.trace(&x, true)?;
            let (loss, g) = cross_entropy(&trace.output, &labels, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("{}: loss became {} in epoch {}", net.name, loss, epoch)));
            }
            correct += trace.output.argmax_rows().iter().zip(&labels).filter(|(p, l)| p == l).count();
            total += loss as f64 * chunk.len() as f64;
            let (_, mut grads) = net.backward(&trace, &g, true)?;
            for (i, slots) in grads.iter_mut().enumerate() {
                gate(i, slots);
            }
            net.update_norm_stats(&trace)?;
            opt.step_network(net, &grads);
        }
        opt.end_epoch();
        let stats = EpochStats {
            epoch,
            loss: (total / data.len() as f64) as f32,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "{} epoch {}: loss {:.4} train acc {:.3}",
            net.name,
            epoch,
            stats.loss,
            stats.train_accuracy
        );
        history.push(stats);
    }
    Ok(history)
}

/// Mean cross-entropy (no smoothing, no augmentation).
pub fn mean_loss(net: &Network, data: &LabeledDataset) -> Result<f32> {
    if data.is_empty() {
        return Err(domain!("loss over an empty dataset"));
    }
    let mut total = 0.0f64;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let (l, _) = cross_entropy(&net.forward(&x)?, &labels, 0.0)?;
        total += l as f64 * chunk.len() as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

pub const EVAL_BATCH: usize = 100;

/// Logits for every example, in dataset order.
pub fn predict_logits(net: &Network, data: &LabeledDataset) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_BATCH)
        .map(|c| c.to_vec())
        .collect();
    let run = |chunk: &Vec<usize>| -> Result<Vec<Vec<f32>>> {
        let (x, _) = data.batch(chunk);
        let y = net.forward(&x)?;
        Ok((0..y.batch()).map(|i| y.item(i).to_vec()).collect())
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<Vec<f32>>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<Vec<f32>>>> = chunks.iter().map(run).collect();
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn predict(net: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(predict_logits(net, data)?.iter().map(|r| argmax(r)).collect())
}

/// Top-1 accuracy over the dataset.
pub fn evaluate_accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(domain!("accuracy over an empty dataset"));
    }
    let out = net.output_dim()?;
    if out != data.num_classes() {
        return Err(structural!("{} outputs {} classes, data has {}", net.name, out, data.num_classes()));
    }
    let preds = predict(net, data)?;
    Ok(preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// Minimum base-over-edge accuracy margin for a usable pair.
pub const MIN_ACCURACY_GAP: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub base_accuracy: f64,
    pub edge_accuracy: f64,
    pub gap: f64,
    pub compatible: bool,
}

impl PairVerdict {
    pub fn from_accuracies(base_accuracy: f64, edge_accuracy: f64) -> Self {
        let gap = base_accuracy - edge_accuracy;
        PairVerdict {
            base_accuracy,
            edge_accuracy,
            gap,
            // tolerance keeps the boundary inclusive under float rounding
            compatible: gap >= MIN_ACCURACY_GAP - 1e-9,
        }
    }
}

pub fn validate_pair(base: &Network, edge: &Network, data: &LabeledDataset) -> Result<PairVerdict> {
    if base.input_shape() != edge.input_shape() {
        return Err(structural!(
            "base input {:?} differs from edge input {:?}",
            base.input_shape(),
            edge.input_shape()
        ));
    }
    let (bc, ec) = (base.output_dim()?, edge.output_dim()?);
    if bc != ec {
        return Err(structural!("base has {} classes, edge has {}", bc, ec));
    }
    Ok(PairVerdict::from_accuracies(
        evaluate_accuracy(base, data)?,
        evaluate_accuracy(edge, data)?,
    ))
}
