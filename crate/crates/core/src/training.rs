//! Feature-matching training of a DELTA network against frozen endpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::delta::{edge_feature_map, fuse, DeltaGrads, DeltaNetwork};
use crate::error::{domain, structural, Error, Result};
use crate::nn::checkpoint::param_checksum;
use crate::nn::layer::Layer;
use crate::nn::network::{Network, ParamGrads};
use crate::nn::train::{evaluate_accuracy, Sgd, SgdConfig, EVAL_BATCH};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fnc: f64,
    pub lambda_sr: f64,
    /// Correlation-penalty strength inside the FNC term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fnc: 1.0,
            lambda_sr: 1e-4,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_fnc", self.lambda_fnc), ("lambda_sr", self.lambda_sr), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    pub fnc: f64,
    pub sr: f64,
}

pub fn total_loss(c: LossComponents, w: &LossWeights) -> f64 {
    c.mse + w.lambda_fnc * c.fnc + w.lambda_sr * c.sr
}

fn check_rows(ts: &[&Tensor]) -> Result<usize> {
    let n = ts[0].batch();
    if n == 0 {
        return Err(domain!("loss over an empty batch"));
    }
    if ts.iter().any(|t| t.shape() != ts[0].shape()) {
        return Err(structural!("loss inputs must share a shape"));
    }
    Ok(n)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Per-example squared distance, averaged over the batch.
pub fn mse_loss(fused: &Tensor, f_b: &Tensor) -> Result<f64> {
    let n = check_rows(&[fused, f_b])?;
    Ok(sq_dist(fused.data(), f_b.data()) / n as f64)
}

/// Gradient of [`mse_loss`] with respect to `fused`.
pub fn mse_grad(fused: &Tensor, f_b: &Tensor) -> Result<Tensor> {
    let n = check_rows(&[fused, f_b])?;
    fused.zip_map(f_b, |a, b| 2.0 * (a - b) / n as f32)
}

/// Feature-wise negative correlation loss.
pub fn fnc_loss(f_e: &Tensor, f_d: &Tensor, f_f: &Tensor, f_b: &Tensor, lambda: f64) -> Result<f64> {
    let n = check_rows(&[f_e, f_d, f_f, f_b])? as f64;
    let mut corr = 0.0;
    for ((e, d), f) in f_e.data().iter().zip(f_d.data()).zip(f_f.data()) {
        corr += (*e as f64 - *f as f64) * (*d as f64 - *f as f64);
    }
    let fit = sq_dist(f_d.data(), f_b.data()) + sq_dist(f_e.data(), f_b.data());
    Ok(2.0 * lambda / n * corr + fit / (2.0 * n))
}

/// Gradients of [`fnc_loss`] with respect to `(F_E, F_delta, F_fused, F_B)`,
/// treating the four batches as independent inputs.
pub fn fnc_grads(f_e: &Tensor, f_d: &Tensor, f_f: &Tensor, f_b: &Tensor, lambda: f64) -> Result<[Tensor; 4]> {
    let n = check_rows(&[f_e, f_d, f_f, f_b])? as f64;
    let len = f_e.len();
    let (mut ge, mut gd, mut gf, mut gb) = (vec![0f32; len], vec![0f32; len], vec![0f32; len], vec![0f32; len]);
    let c = 2.0 * lambda / n;
    for i in 0..len {
        let (e, d, f, b) = (
            f_e.data()[i] as f64,
            f_d.data()[i] as f64,
            f_f.data()[i] as f64,
            f_b.data()[i] as f64,
        );
        ge[i] = (c * (d - f) + (e - b) / n) as f32;
        gd[i] = (c * (e - f) + (d - b) / n) as f32;
        gf[i] = (c * (2.0 * f - e - d)) as f32;
        gb[i] = (-(d - b) / n - (e - b) / n) as f32;
    }
    let s = f_e.shape();
    Ok([
        Tensor::from_vec(s, ge)?,
        Tensor::from_vec(s, gd)?,
        Tensor::from_vec(s, gf)?,
        Tensor::from_vec(s, gb)?,
    ])
}

fn conv_groups(layer: &Layer) -> Option<(usize, usize, usize, &[f32])> {
    match layer {
        Layer::Conv2d(c) => Some((c.out_channels, c.in_channels, c.kernel * c.kernel, &c.weight)),
        _ => None,
    }
}

/// Group lasso over output filters and input channels of every conv layer.
pub fn sr_loss(net: &Network) -> f64 {
    let mut total = 0.0;
    for layer in net.layers() {
        let Some((o, i, k, w)) = conv_groups(layer) else { continue };
        let mut chan = vec![0.0f64; i];
        for f in 0..o {
            let mut filt = 0.0f64;
            for c in 0..i {
                for v in &w[(f * i + c) * k..(f * i + c + 1) * k] {
                    let sq = (*v as f64).powi(2);
                    filt += sq;
                    chan[c] += sq;
                }
            }
            total += filt.sqrt();
        }
        total += chan.iter().map(|s| s.sqrt()).sum::<f64>();
    }
    total
}

/// Weight gradients of [`sr_loss`], zero for all-zero groups.
pub fn sr_grads(net: &Network) -> ParamGrads {
    net.layers()
        .iter()
        .map(|layer| {
            let Some((o, i, k, w)) = conv_groups(layer) else {
                return Vec::new();
            };
            let mut filt = vec![0.0f64; o];
            let mut chan = vec![0.0f64; i];
            for f in 0..o {
                for c in 0..i {
                    for v in &w[(f * i + c) * k..(f * i + c + 1) * k] {
                        let sq = (*v as f64).powi(2);
                        filt[f] += sq;
                        chan[c] += sq;
                    }
                }
            }
            let inv = |s: f64| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 };
            let mut g = vec![0f32; w.len()];
            for f in 0..o {
                for c in 0..i {
                    let scale = inv(filt[f]) + inv(chan[c]);
                    for j in (f * i + c) * k..(f * i + c + 1) * k {
                        g[j] = (w[j] as f64 * scale) as f32;
                    }
                }
            }
            let bias = match layer {
                Layer::Conv2d(c) => vec![0f32; c.bias.len()],
                _ => unreachable!(),
            };
            vec![g, bias]
        })
        .collect()
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(structural!("pearson needs two equally long non-empty samples"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::UndefinedScore("zero-variance deviations".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of `F_E - F_fused` and `F_delta - F_fused` over all
/// (example, dimension) pairs.
pub fn correlation_score(f_e: &Tensor, f_d: &Tensor, f_f: &Tensor) -> Result<f64> {
    check_rows(&[f_e, f_d, f_f])?;
    let a: Vec<f64> = f_e.data().iter().zip(f_f.data()).map(|(e, f)| (*e - *f) as f64).collect();
    let b: Vec<f64> = f_d.data().iter().zip(f_f.data()).map(|(d, f)| (*d - *f) as f64).collect();
    pearson(&a, &b)
}

/// Pearson correlation of the two paths' errors against the base features,
/// `F_E - F_B` and `F_delta - F_B`. Unlike [`correlation_score`] this is not
/// pinned to -1 when the fusion is an unweighted mean.
pub fn error_correlation_score(f_e: &Tensor, f_d: &Tensor, f_b: &Tensor) -> Result<f64> {
    check_rows(&[f_e, f_d, f_b])?;
    let a: Vec<f64> = f_e.data().iter().zip(f_b.data()).map(|(e, b)| (*e - *b) as f64).collect();
    let b: Vec<f64> = f_d.data().iter().zip(f_b.data()).map(|(d, b)| (*d - *b) as f64).collect();
    pearson(&a, &b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Evaluate on the held-out set every this many epochs (0 = never).
    pub eval_every: usize,
    /// Global gradient-norm ceiling over all DELTA parameters (0 = off).
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for DeltaTrainConfig {
    fn default() -> Self {
        DeltaTrainConfig {
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig::default(),
            eval_every: 1,
            clip_norm: 20.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_fnc: f64,
    pub l_sr: f64,
    pub total: f64,
    pub fused_acc: Option<f64>,
    pub edge_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fused_acc: f64,
    pub edge_acc: f64,
    pub base_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub epochs: usize,
    pub optimizer: SgdConfig,
    pub weights: LossWeights,
    pub trace: Vec<EpochRecord>,
    pub final_eval: Option<EvalRecord>,
    pub base_checksum: String,
    pub edge_checksum: String,
}

/// Applies `f` to the whole dataset in evaluation batches and stacks the rows.
pub fn map_dataset(data: &LabeledDataset, f: impl Fn(&Tensor) -> Result<Tensor> + Sync) -> Result<Tensor> {
    let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(EVAL_BATCH).map(<[usize]>::to_vec).collect();
    let run = |idx: &Vec<usize>| f(&data.batch(idx).0);
    #[cfg(feature = "parallel")]
    let parts: Vec<Tensor> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Tensor> = chunks.iter().map(run).collect::<Result<_>>()?;
    let Some(first) = parts.first() else {
        return Err(domain!("cannot map an empty dataset"));
    };
    let item_shape = first.shape()[1..].to_vec();
    let rows: Vec<&[f32]> = parts.iter().flat_map(|p| (0..p.batch()).map(move |i| p.item(i))).collect();
    Tensor::stack(&item_shape, &rows)
}

/// Fused-model predictions for every example.
pub fn fused_predictions(delta: &DeltaNetwork, base: &Network, edge: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    let logits = map_dataset(data, |x| delta.logits(base, x, &edge_feature_map(edge, x)?))?;
    Ok(logits.argmax_rows())
}

pub fn evaluate_fused(delta: &DeltaNetwork, base: &Network, edge: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(domain!("cannot evaluate on an empty dataset"));
    }
    let pred = fused_predictions(delta, base, edge, data)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count() as f64 / data.len() as f64)
}

/// Indices the edge model gets wrong and the base model gets right.
pub fn complementary_subset(base: &Network, edge: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    let pb = map_dataset(data, |x| base.forward(x))?.argmax_rows();
    let pe = map_dataset(data, |x| edge.forward(x))?.argmax_rows();
    Ok((0..data.len()).filter(|&i| pb[i] == data.labels[i] && pe[i] != data.labels[i]).collect())
}

/// `(F_E, F_delta, F_fused, F_B)` over a dataset.
pub fn dataset_features(delta: &DeltaNetwork, base: &Network, edge: &Network, data: &LabeledDataset) -> Result<[Tensor; 4]> {
    let f_e = map_dataset(data, |x| Ok(delta.features(x, &edge_feature_map(edge, x)?)?.0))?;
    let f_d = map_dataset(data, |x| Ok(delta.features(x, &edge_feature_map(edge, x)?)?.1))?;
    let f_f = fuse(&f_e, &f_d)?;
    let f_b = map_dataset(data, |x| base.features(x))?;
    Ok([f_e, f_d, f_f, f_b])
}

/// Rescales every gradient so their joint l2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut ParamGrads], max: f32) -> f64 {
    let total = grads
        .iter()
        .flat_map(|g| g.iter().flatten().flatten())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max > 0.0 && total > max as f64 {
        let s = (max as f64 / total) as f32;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut().flatten().flatten()) {
            *v *= s;
        }
    }
    total
}

fn step(opts: &mut [Sgd; 4], delta: &mut DeltaNetwork, g: &DeltaGrads, sr: Option<(&ParamGrads, f32)>, clip: f32) {
    let mut branch = g.branch.clone();
    if let Some((srg, w)) = sr {
        for (slots, extra) in branch.iter_mut().zip(srg) {
            for (s, e) in slots.iter_mut().zip(extra) {
                for (a, b) in s.iter_mut().zip(e) {
                    *a += w * b;
                }
            }
        }
    }
    let (mut refiner, mut adapter, mut resizer) = (g.refiner.clone(), g.adapter.clone(), g.resizer.clone());
    clip_grad_norm(&mut [&mut branch, &mut refiner, &mut adapter, &mut resizer], clip);
    let grads = [&branch, &refiner, &adapter, &resizer];
    for ((opt, net), grads) in opts.iter_mut().zip(delta.components_mut()).zip(grads) {
        opt.step_network(net, grads);
    }
}

/// Trains only the DELTA-owned parameters; `base` and `edge` are read-only
/// and their checksums are verified before returning.
pub fn train_delta(
    delta: &mut DeltaNetwork,
    base: &Network,
    edge: &Network,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    weights: &LossWeights,
    cfg: &DeltaTrainConfig,
) -> Result<TrainingRun> {
    weights.validate()?;
    if train.is_empty() {
        return Err(domain!("cannot train on an empty dataset"));
    }
    let base_checksum = param_checksum(base);
    let edge_checksum = param_checksum(edge);
    let mut run = TrainingRun {
        epochs: cfg.epochs,
        optimizer: cfg.sgd.clone(),
        weights: *weights,
        trace: Vec::with_capacity(cfg.epochs),
        final_eval: None,
        base_checksum: base_checksum.clone(),
        edge_checksum: edge_checksum.clone(),
    };
    if cfg.epochs == 0 {
        return Ok(run);
    }
    // the endpoints are frozen, so their outputs are computed once
    let all_fb = map_dataset(train, |x| base.features(x))?;
    let all_edge = map_dataset(train, |x| edge_feature_map(edge, x))?;
    let edge_acc = match eval {
        Some(e) => Some(evaluate_accuracy(edge, e)?),
        None => None,
    };
    let mut opts = [(); 4].map(|_| Sgd::new(cfg.sgd.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, _) = train.batch(chunk);
            let f_b = all_fb.select(chunk);
            let edge_map = all_edge.select(chunk);
            let t = delta.trace(&x, &edge_map)?;
            let (f_e, f_d) = (t.f_e(), t.f_delta());
            let f_f = fuse(f_e, f_d)?;
            let c = LossComponents {
                mse: mse_loss(&f_f, &f_b)?,
                fnc: fnc_loss(f_e, f_d, &f_f, &f_b, weights.lambda)?,
                sr: sr_loss(&delta.branch),
            };
            let l = total_loss(c, weights);
            if !l.is_finite() {
                return Err(Error::Training(format!(
                    "DELTA loss became {} in epoch {} (mse {}, fnc {}, sr {})",
                    l, epoch, c.mse, c.fnc, c.sr
                )));
            }
            let w = chunk.len() as f64;
            sums.mse += c.mse * w;
            sums.fnc += c.fnc * w;
            sums.sr += c.sr * w;
            total += l * w;

            let g_mse = mse_grad(&f_f, &f_b)?;
            let [ge, gd, gf, _] = fnc_grads(f_e, f_d, &f_f, &f_b, weights.lambda)?;
            let lf = weights.lambda_fnc as f32;
            // fused = (e + d) / 2
            let d_fused = g_mse.zip_map(&gf, |a, b| a + lf * b)?;
            let d_fe = ge.zip_map(&d_fused, |g, f| lf * g + f / 2.0)?;
            let d_fd = gd.zip_map(&d_fused, |g, f| lf * g + f / 2.0)?;
            let grads = delta.backward(&t, &d_fe, &d_fd, true)?;
            let srg = sr_grads(&delta.branch);
            step(&mut opts, delta, &grads, Some((&srg, weights.lambda_sr as f32)), cfg.clip_norm);
        }
        for o in &mut opts {
            o.end_epoch();
        }
        let n = train.len() as f64;
        let fused_acc = match eval {
            Some(e) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) => {
                Some(evaluate_fused(delta, base, edge, e)?)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            l_mse: sums.mse / n,
            l_fnc: sums.fnc / n,
            l_sr: sums.sr / n,
            total: total / n,
            fused_acc,
            edge_acc: fused_acc.and(edge_acc),
        };
        log::info!(
            "delta epoch {}: mse {:.4} fnc {:.4} sr {:.3} total {:.4} fused {:?} edge {:?}",
            epoch,
            rec.l_mse,
            rec.l_fnc,
            rec.l_sr,
            rec.total,
            rec.fused_acc,
            rec.edge_acc
        );
        run.trace.push(rec);
    }
    if param_checksum(base) != base_checksum || param_checksum(edge) != edge_checksum {
        return Err(Error::Consistency("base or edge parameters changed during DELTA training".into()));
    }
    if let Some(e) = eval {
        run.final_eval = Some(EvalRecord {
            fused_acc: evaluate_fused(delta, base, edge, e)?,
            edge_acc: edge_acc.unwrap_or_default(),
            base_acc: evaluate_accuracy(base, e)?,
        });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Conv2d;
    use rand::Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut a: ParamGrads = vec![vec![vec![3.0]]];
        let mut b: ParamGrads = vec![vec![vec![4.0], vec![]]];
        assert_eq!(clip_grad_norm(&mut [&mut a, &mut b], 10.0), 5.0);
        assert_eq!((a[0][0][0], b[0][0][0]), (3.0, 4.0));
        assert_eq!(clip_grad_norm(&mut [&mut a, &mut b], 1.0), 5.0);
        assert!((a[0][0][0] - 0.6).abs() < 1e-6 && (b[0][0][0] - 0.8).abs() < 1e-6);
        clip_grad_norm(&mut [&mut a, &mut b], 0.0);
        assert!((a[0][0][0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn mse_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[0.0, 0.0])).unwrap(), 5.0);
        assert_eq!(mse_loss(&t(&[2, 2], &[1.0, 0.0, 0.0, 3.0]), &Tensor::zeros(&[2, 2])).unwrap(), 5.0);
        assert!(matches!(mse_loss(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])), Err(Error::Domain(_))));
    }

    #[test]
    fn fnc_examples() {
        let one = |v: f32| t(&[1, 1], &[v]);
        assert_eq!(fnc_loss(&one(1.0), &one(-1.0), &one(0.0), &one(0.0), 0.5).unwrap(), 0.0);
        let a = t(&[1, 3], &[0.5, -1.0, 2.0]);
        assert_eq!(fnc_loss(&a, &a, &a, &a, 0.7).unwrap(), 0.0);
        let (e, d, f, b) = (
            t(&[2, 2], &[1.0, 2.0, 0.5, -1.0]),
            t(&[2, 2], &[0.0, 1.0, 2.0, 3.0]),
            t(&[2, 2], &[0.3, 0.3, 0.3, 0.3]),
            t(&[2, 2], &[1.0, 0.0, -1.0, 2.0]),
        );
        let half = (mse_loss(&d, &b).unwrap() + mse_loss(&e, &b).unwrap()) / 2.0;
        assert_eq!(fnc_loss(&e, &d, &f, &b, 0.0).unwrap(), half);
    }

    #[test]
    fn fnc_at_half_lambda_equals_mse_of_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |n| Tensor::from_vec(&[4, n], (0..4 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (e, d, b) = (r(5), r(5), r(5));
        let f = fuse(&e, &d).unwrap();
        let fnc = fnc_loss(&e, &d, &f, &b, 0.5).unwrap();
        let mse = mse_loss(&f, &b).unwrap();
        assert!((fnc - mse).abs() < 1e-5 * (1.0 + mse));
    }

    #[test]
    fn sr_examples() {
        let conv = |w: Vec<f32>, o, i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut c = Conv2d::new(&mut rng, i, o, 1, 1, 0);
            c.weight = w;
            Network::new("n", &[i, 2, 2], vec![Layer::Conv2d(c)], 1).unwrap()
        };
        assert_eq!(sr_loss(&conv(vec![3.0, 4.0], 2, 1)), 12.0);
        assert_eq!(sr_loss(&conv(vec![0.0, 0.0], 2, 1)), 0.0);
        let w: Vec<f32> = vec![0.5, -1.5, 2.0, 0.25, 1.0, -0.75];
        let base = sr_loss(&conv(w.clone(), 3, 2));
        let scaled = sr_loss(&conv(w.iter().map(|v| v * 2.5).collect(), 3, 2));
        assert!((scaled - 2.5 * base).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents { mse: 1.0, fnc: 2.0, sr: 3.0 };
        let w = LossWeights { lambda_fnc: 0.5, lambda_sr: 0.1, lambda: 0.5 };
        assert!((total_loss(c, &w) - 2.3).abs() < 1e-12);
        let zero = LossWeights { lambda_fnc: 0.0, lambda_sr: 0.0, lambda: 0.5 };
        assert_eq!(total_loss(c, &zero), 1.0);
        assert_eq!(total_loss(LossComponents::default(), &w), 0.0);
        assert!(LossWeights { lambda_sr: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn correlation_examples() {
        let e = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let neg = e.scale(-1.0);
        let zero = Tensor::zeros(&[2, 2]);
        assert!((correlation_score(&e, &neg, &zero).unwrap() + 1.0).abs() < 1e-12);
        assert!((correlation_score(&e, &e, &zero).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(correlation_score(&zero, &zero, &zero), Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn mean_fusion_pins_correlation_score_to_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = || Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (e, d) = (r(), r());
        let f = fuse(&e, &d).unwrap();
        assert!((correlation_score(&e, &d, &f).unwrap() + 1.0).abs() < 1e-6);
    }
}
