//! Structured subgraph extraction: candidate sparsity rates, l2-ranked
//! filter masks, the extended network used to learn per-layer sparsity
//! coefficients, compaction, tail truncation and masked fine-tuning.
//!
//! A structural unit is a conv filter (output channel) or a linear row
//! (output feature). Masking a unit zeroes its weights and its bias, so the
//! unit's output is exactly zero and it can be removed without changing the
//! function of the network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{domain, structural, Error, Result};
use crate::nn::arch::stage_ends;
use crate::nn::cost::{count_macs, count_params, per_layer_costs, CostProfile};
use crate::nn::layer::{Conv2d, Layer, Linear};
use crate::nn::network::Network;
use crate::nn::train::{cross_entropy, train_classifier, EpochStats, Sgd, SgdConfig, TrainConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// candidates and coefficients

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityCandidates {
    pub conv: Vec<f64>,
    pub linear: Vec<f64>,
}

impl Default for SparsityCandidates {
    fn default() -> Self {
        SparsityCandidates {
            conv: (1..=7).map(|k| 0.125 * k as f64).collect(),
            linear: (1..=4).map(|k| 0.2 * k as f64).collect(),
        }
    }
}

impl SparsityCandidates {
    pub fn validate(&self) -> Result<()> {
        for (kind, rates) in [("conv", &self.conv), ("linear", &self.linear)] {
            if rates.is_empty() {
                return Err(Error::Config(format!("no {kind} sparsity candidates")));
            }
            if rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
                return Err(Error::Config(format!("{kind} candidates must lie in [0, 1): {rates:?}")));
            }
            if rates.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{kind} candidates must be strictly increasing: {rates:?}")));
            }
        }
        Ok(())
    }

    pub fn for_layer(&self, layer: &Layer) -> Option<&[f64]> {
        match layer {
            Layer::Conv2d(_) => Some(&self.conv),
            Layer::Linear(_) => Some(&self.linear),
            _ => None,
        }
    }

    /// `k` distinct rates spread evenly over the candidate list; a single
    /// branch takes the lowest rate.
    pub fn pick(rates: &[f64], k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if k > rates.len() {
            return Err(Error::Config(format!("K = {k} exceeds the {} distinct candidates", rates.len())));
        }
        if k == 1 {
            return Ok(vec![rates[0]]);
        }
        Ok((0..k)
            .map(|j| rates[((j * (rates.len() - 1)) as f64 / (k - 1) as f64).round() as usize])
            .collect())
    }
}

/// `|raw| / sum |raw|`.
pub fn normalize_coefficients(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    if raw.is_empty() || total == 0.0 || !total.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize coefficients {raw:?}")));
    }
    Ok(raw.iter().map(|v| v.abs() / total).collect())
}

/// Convex combination `sum_i gamma_i * zeta_i`.
pub fn effective_sparsity(gamma: &[f64], rates: &[f64]) -> Result<f64> {
    if gamma.len() != rates.len() || gamma.is_empty() {
        return Err(domain!("{} coefficients for {} rates", gamma.len(), rates.len()));
    }
    if gamma.iter().any(|&g| g < 0.0) || (gamma.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(domain!("coefficients {:?} are not normalized", gamma));
    }
    let z: f64 = gamma.iter().zip(rates).map(|(g, r)| g * r).sum();
    let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(z.clamp(lo, hi))
}

// ---------------------------------------------------------------------------
// masks

/// Number of zeroed units at rate `zeta`: `round(zeta * units)`, half up.
pub fn zero_unit_count(zeta: f64, units: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(domain!("sparsity {} outside [0, 1)", zeta));
    }
    Ok(((zeta * units as f64) + 0.5 + 1e-9).floor() as usize)
}

/// Structured 0/1 mask over the leading (unit) axis of a weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub shape: Vec<usize>,
    pub sparsity: f64,
    /// One flag per unit; `false` means the whole unit is zeroed.
    pub keep: Vec<bool>,
}

impl BinaryMask {
    pub fn ones(shape: &[usize]) -> Self {
        BinaryMask {
            shape: shape.to_vec(),
            sparsity: 0.0,
            keep: vec![true; shape.first().copied().unwrap_or(0)],
        }
    }

    pub fn units(&self) -> usize {
        self.keep.len()
    }

    pub fn unit_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn zeroed_units(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn kept(&self) -> usize {
        self.units() - self.zeroed_units()
    }

    /// Dense 0/1 tensor congruent with the weights.
    pub fn to_tensor(&self) -> Tensor {
        let l = self.unit_len();
        let data = self
            .keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, l))
            .collect();
        Tensor::from_vec(&self.shape, data).expect("mask shape")
    }
}

fn unit_view(weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape() {
        [u, rest @ ..] if !rest.is_empty() && *u > 0 => Ok((*u, rest.iter().product())),
        s => Err(structural!("weights {:?} have no unit axis", s)),
    }
}

/// Zeroes the `round(zeta * U)` units with the smallest l2 norms; ties go
/// to the lowest index.
pub fn generate_mask_l2(weights: &Tensor, zeta: f64) -> Result<BinaryMask> {
    let (units, len) = unit_view(weights)?;
    let zeros = zero_unit_count(zeta, units)?;
    let norms: Vec<f64> = (0..units)
        .map(|u| {
            weights.data()[u * len..(u + 1) * len]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..units).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut keep = vec![true; units];
    for &u in &order[..zeros] {
        keep[u] = false;
    }
    Ok(BinaryMask {
        shape: weights.shape().to_vec(),
        sparsity: zeta,
        keep,
    })
}

/// Zeroes `round(zeta * U)` units drawn uniformly without replacement.
pub fn generate_random_mask(weights: &Tensor, zeta: f64, seed: u64) -> Result<BinaryMask> {
    let (units, _) = unit_view(weights)?;
    let zeros = zero_unit_count(zeta, units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut rng);
    let mut keep = vec![true; units];
    for &u in &order[..zeros] {
        keep[u] = false;
    }
    Ok(BinaryMask {
        shape: weights.shape().to_vec(),
        sparsity: zeta,
        keep,
    })
}

/// Elementwise product of weights and a congruent mask.
pub fn apply_mask(weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if weights.shape() != mask.shape() {
        return Err(structural!("mask {:?} does not match weights {:?}", mask.shape(), weights.shape()));
    }
    weights.zip_map(mask, |w, m| w * m)
}

// ---------------------------------------------------------------------------
// per-layer helpers

fn unit_weights(layer: &Layer) -> Option<Tensor> {
    match layer {
        Layer::Conv2d(c) => Some(
            Tensor::from_vec(
                &[c.out_channels, c.in_channels, c.kernel, c.kernel],
                c.weight.clone(),
            )
            .expect("conv weight"),
        ),
        Layer::Linear(l) => Some(Tensor::from_vec(&[l.out_features, l.in_features], l.weight.clone()).expect("linear weight")),
        _ => None,
    }
}

/// Zeroes the weights and bias of every dropped unit.
pub fn mask_layer(layer: &mut Layer, mask: &BinaryMask) -> Result<()> {
    let (weight, bias) = match layer {
        Layer::Conv2d(c) => (&mut c.weight, &mut c.bias),
        Layer::Linear(l) => (&mut l.weight, &mut l.bias),
        _ => return Err(structural!("only conv and linear layers can be masked")),
    };
    if bias.len() != mask.units() || weight.len() != mask.units() * mask.unit_len() {
        return Err(structural!("mask {:?} does not fit layer", mask.shape));
    }
    let l = mask.unit_len();
    for (u, &k) in mask.keep.iter().enumerate() {
        if !k {
            weight[u * l..(u + 1) * l].fill(0.0);
            bias[u] = 0.0;
        }
    }
    Ok(())
}

/// Indices of layers eligible for pruning: every conv and linear layer
/// except the final classifier.
pub fn prunable_layers(net: &Network) -> Vec<usize> {
    let last = net.len().checked_sub(1);
    net.layers()
        .iter()
        .enumerate()
        .filter(|(i, l)| l.is_prunable() && Some(*i) != last)
        .map(|(i, _)| i)
        .collect()
}

fn units_of(layer: &Layer) -> usize {
    match layer {
        Layer::Conv2d(c) => c.out_channels,
        Layer::Linear(l) => l.out_features,
        _ => 0,
    }
}

/// Cost of a layer after dropping `zeros` of its output units.
fn pruned_layer_cost(full: CostProfile, layer: &Layer, input: &[usize], zeros: usize) -> Result<CostProfile> {
    let units = units_of(layer) as u64;
    let kept = units - zeros as u64;
    let out: u64 = layer.out_shape(input)?.iter().product::<usize>() as u64;
    let inp: u64 = input.iter().product::<usize>() as u64;
    let params = full.param_count * kept / units;
    Ok(CostProfile {
        param_count: params,
        mac_count: full.mac_count * kept / units,
        mem_access_cost: params + inp + out * kept / units,
    })
}

// ---------------------------------------------------------------------------
// extended network

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedLayer {
    pub layer: usize,
    pub rates: Vec<f64>,
    pub masks: Vec<BinaryMask>,
    /// Raw learnable coefficients, one per branch.
    pub gamma: Vec<f64>,
    /// Per-branch cost with the branch's units removed.
    pub costs: Vec<CostProfile>,
}

impl ExtendedLayer {
    /// Per-unit output scale `sum_j gamma_j * m_j[u]`.
    pub fn unit_scale(&self) -> Vec<f32> {
        let units = self.masks[0].units();
        (0..units)
            .map(|u| {
                self.masks
                    .iter()
                    .zip(&self.gamma)
                    .map(|(m, &g)| if m.keep[u] { g } else { 0.0 })
                    .sum::<f64>() as f32
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySearchState {
    pub k: usize,
    pub layers: Vec<ExtendedLayer>,
}

impl SparsitySearchState {
    pub fn coefficient_count(&self) -> usize {
        self.layers.iter().map(|l| l.gamma.len()).sum()
    }

    /// Normalized coefficients per extended layer.
    pub fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        self.layers.iter().map(|l| normalize_coefficients(&l.gamma)).collect()
    }
}

/// K masked branches per prunable layer sharing the frozen base weights.
/// Each branch output is `m_j * z` for the layer output `z`, so the layer
/// computes `y = sum_j gamma_j m_j * z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedNetwork {
    pub base: Network,
    pub state: SparsitySearchState,
}

pub fn build_extended_network(base: &Network, candidates: &SparsityCandidates, k: usize) -> Result<ExtendedNetwork> {
    candidates.validate()?;
    if base.layers().iter().any(|l| matches!(l, Layer::BatchNorm2d(_))) {
        return Err(structural!("fold batch norm into the convs before extending {}", base.name));
    }
    let costs = per_layer_costs(base)?;
    let mut layers = Vec::new();
    for idx in prunable_layers(base) {
        let layer = &base.layers()[idx];
        let rates = SparsityCandidates::pick(candidates.for_layer(layer).expect("prunable"), k)?;
        let w = unit_weights(layer).expect("prunable");
        let input = base.shape_at(idx)?;
        let mut masks = Vec::with_capacity(k);
        let mut branch_costs = Vec::with_capacity(k);
        for &r in &rates {
            let m = generate_mask_l2(&w, r)?;
            branch_costs.push(pruned_layer_cost(costs[idx], layer, &input, m.zeroed_units())?);
            masks.push(m);
        }
        layers.push(ExtendedLayer {
            layer: idx,
            rates,
            masks,
            gamma: vec![1.0 / k as f64; k],
            costs: branch_costs,
        });
    }
    Ok(ExtendedNetwork {
        base: base.clone(),
        state: SparsitySearchState { k, layers },
    })
}

fn scale_units(z: &Tensor, scale: &[f32]) -> Tensor {
    let mut y = z.clone();
    let per = z.item_len() / scale.len();
    for i in 0..z.batch() {
        for (u, chunk) in y.item_mut(i).chunks_mut(per).enumerate() {
            for v in chunk {
                *v *= scale[u];
            }
        }
    }
    y
}

/// Recorded pass through an extended network.
pub struct ExtendedTrace {
    inputs: Vec<Tensor>,
    /// Pre-scale outputs of the extended layers, by position in `state.layers`.
    raw: Vec<Tensor>,
    pub output: Tensor,
}

impl ExtendedNetwork {
    fn slot_of(&self, layer: usize) -> Option<usize> {
        self.state.layers.iter().position(|l| l.layer == layer)
    }

    pub fn trace(&self, x: &Tensor) -> Result<ExtendedTrace> {
        let mut inputs = Vec::with_capacity(self.base.len());
        let mut raw = vec![Tensor::zeros(&[0]); self.state.layers.len()];
        let mut cur = x.clone();
        for (i, layer) in self.base.layers().iter().enumerate() {
            let z = layer.forward(&cur, false)?;
            inputs.push(cur);
            cur = match self.slot_of(i) {
                Some(s) => {
                    let y = scale_units(&z, &self.state.layers[s].unit_scale());
                    raw[s] = z;
                    y
                }
                None => z,
            };
        }
        Ok(ExtendedTrace { inputs, raw, output: cur })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x)?.output)
    }

    /// Gradient of the objective with respect to every raw coefficient,
    /// given its gradient at the network output. Base weights receive none.
    pub fn coefficient_grads(&self, trace: &ExtendedTrace, grad_out: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut grads: Vec<Vec<f64>> = self.state.layers.iter().map(|l| vec![0.0; l.gamma.len()]).collect();
        let mut g = grad_out.clone();
        for i in (0..self.base.len()).rev() {
            if let Some(s) = self.slot_of(i) {
                let ext = &self.state.layers[s];
                let z = &trace.raw[s];
                let per = z.item_len() / ext.masks[0].units();
                // sum over batch and space of g * z, per unit
                let mut gz = vec![0.0f64; ext.masks[0].units()];
                for n in 0..z.batch() {
                    for (k, (&gv, &zv)) in g.item(n).iter().zip(z.item(n)).enumerate() {
                        gz[k / per] += (gv * zv) as f64;
                    }
                }
                for (j, m) in ext.masks.iter().enumerate() {
                    grads[s][j] = m.keep.iter().zip(&gz).filter(|(k, _)| **k).map(|(_, v)| v).sum();
                }
                g = scale_units(&g, &ext.unit_scale());
            }
            if i == 0 {
                break;
            }
            let (dx, _) = self.base.layers()[i].backward(&trace.inputs[i], &g, false, false)?;
            g = dx;
        }
        Ok(grads)
    }

    /// Gradients with respect to each branch's own (masked) weight copy,
    /// per extended layer and branch. Masked units get exactly zero.
    pub fn branch_weight_grads(&self, trace: &ExtendedTrace, grad_out: &Tensor) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut out: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.state.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.base.len()).rev() {
            let slot = self.slot_of(i);
            if let Some(s) = slot {
                let ext = &self.state.layers[s];
                let gz = scale_units(&g, &ext.unit_scale());
                // y = sum_j gamma_j (m_j W) x, so dW_j = gamma_j m_j (g x^T)
                let (_, dp) = self.base.layers()[i].backward(&trace.inputs[i], &g, false, true)?;
                let l = ext.masks[0].unit_len();
                out[s] = ext
                    .masks
                    .iter()
                    .zip(&ext.gamma)
                    .map(|(m, &gamma)| {
                        dp[0]
                            .iter()
                            .enumerate()
                            .map(|(k, &v)| if m.keep[k / l] { v * gamma as f32 } else { 0.0 })
                            .collect()
                    })
                    .collect();
                let (dx, _) = self.base.layers()[i].backward(&trace.inputs[i], &gz, false, false)?;
                g = dx;
            } else {
                let (dx, _) = self.base.layers()[i].backward(&trace.inputs[i], &g, false, false)?;
                g = dx;
            }
        }
        Ok(out)
    }

    /// Cost-weighted coefficient penalty `sum |gamma| (alpha G + beta H)`.
    pub fn cost_penalty(&self, alpha: f64, beta: f64) -> f64 {
        self.state
            .layers
            .iter()
            .flat_map(|l| l.gamma.iter().zip(&l.costs))
            .map(|(g, c)| g.abs() * (alpha * c.mem_access_cost as f64 + beta * c.mac_count as f64))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub candidates: SparsityCandidates,
    pub k: usize,
    pub lambda0: f64,
    pub lambda1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            candidates: SparsityCandidates::default(),
            k: 3,
            lambda0: 0.5,
            lambda1: 1.0,
            alpha: 1e-5,
            beta: 1e-7,
            epochs: 2,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

/// `lambda0 * ce + lambda1 * sum_ij |gamma_ij| (alpha G_ij + beta H_ij)`.
pub fn extraction_loss(ce: f64, state: &SparsitySearchState, lambda0: f64, lambda1: f64, alpha: f64, beta: f64) -> Result<f64> {
    if [lambda0, lambda1, alpha, beta].iter().any(|&v| v < 0.0) {
        return Err(domain!("extraction hyperparameters must be non-negative"));
    }
    let mut penalty = 0.0;
    for l in &state.layers {
        if l.gamma.len() != l.costs.len() {
            return Err(structural!("layer {} has {} coefficients and {} costs", l.layer, l.gamma.len(), l.costs.len()));
        }
        for (g, c) in l.gamma.iter().zip(&l.costs) {
            penalty += g.abs() * (alpha * c.mem_access_cost as f64 + beta * c.mac_count as f64);
        }
    }
    Ok(lambda0 * ce + lambda1 * penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub loss: f64,
}

/// Learns the raw coefficients only; every base weight stays frozen.
pub fn train_sparsity_coefficients(
    ext: &mut ExtendedNetwork,
    data: &LabeledDataset,
    cfg: &ExtractionConfig,
) -> Result<Vec<CoefficientEpoch>> {
    if data.is_empty() && cfg.epochs > 0 {
        return Err(domain!("coefficient search needs data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut loss_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = data.batch(chunk);
            let trace = ext.trace(&x)?;
            let (ce, g) = cross_entropy(&trace.output, &labels, 0.0)?;
            let loss = extraction_loss(ce as f64, &ext.state, cfg.lambda0, cfg.lambda1, cfg.alpha, cfg.beta)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "coefficient search diverged in epoch {epoch}: gamma {:?}",
                    ext.state.layers.iter().map(|l| &l.gamma).collect::<Vec<_>>()
                )));
            }
            let grads = ext.coefficient_grads(&trace, &g.scale(cfg.lambda0 as f32))?;
            for (s, layer) in ext.state.layers.iter_mut().enumerate() {
                let mut gs: Vec<f32> = grads[s]
                    .iter()
                    .zip(&layer.gamma)
                    .zip(&layer.costs)
                    .map(|((&gd, &gm), c)| {
                        let cost = cfg.alpha * c.mem_access_cost as f64 + cfg.beta * c.mac_count as f64;
                        (gd + cfg.lambda1 * gm.signum() * cost) as f32
                    })
                    .collect();
                let mut params: Vec<f32> = layer.gamma.iter().map(|&v| v as f32).collect();
                opt.update(s, &mut params, &gs);
                gs.clear();
                for (g, p) in layer.gamma.iter_mut().zip(params) {
                    *g = p as f64;
                }
            }
            ce_sum += ce as f64 * chunk.len() as f64;
            loss_sum += loss * chunk.len() as f64;
        }
        opt.end_epoch();
        let n = data.len() as f64;
        history.push(CoefficientEpoch {
            epoch,
            ce: ce_sum / n,
            loss: loss_sum / n,
        });
        log::info!("coefficient search epoch {}: ce {:.4}", epoch, ce_sum / n);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// subgraph

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerExtraction {
    pub layer: usize,
    pub kind: String,
    pub candidates: Vec<f64>,
    pub gamma: Vec<f64>,
    pub effective_sparsity: f64,
    pub units: usize,
    pub zeroed_units: usize,
    pub pre_cost: CostProfile,
    pub post_cost: CostProfile,
}

/// A masked copy of the base network plus the feature-extractor cut.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSpec {
    /// Base architecture with dropped units zeroed; includes the head.
    pub network: Network,
    pub masks: Vec<(usize, BinaryMask)>,
    pub layers: Vec<LayerExtraction>,
    /// Number of leading layers kept as the DELTA branch.
    pub truncate_at: usize,
}

impl SubgraphSpec {
    /// Compacted branch: the kept feature-extractor layers with dropped
    /// units and their downstream input channels removed.
    pub fn branch(&self) -> Result<Network> {
        let compact = compact(&self.network, &self.masks)?;
        let layers = compact.layers()[..self.truncate_at].to_vec();
        Network::new(&format!("{}-branch", self.network.name), compact.input_shape(), layers, self.truncate_at)
    }

    /// Whole masked network with dropped units physically removed.
    pub fn compacted(&self) -> Result<Network> {
        compact(&self.network, &self.masks)
    }

    pub fn mask_for(&self, layer: usize) -> Option<&BinaryMask> {
        self.masks.iter().find(|(l, _)| *l == layer).map(|(_, m)| m)
    }

    /// Sum of absolute weights at masked positions.
    pub fn masked_weight_mass(&self) -> f64 {
        let mut total = 0.0;
        for (idx, mask) in &self.masks {
            let (w, b) = match &self.network.layers()[*idx] {
                Layer::Conv2d(c) => (&c.weight, &c.bias),
                Layer::Linear(l) => (&l.weight, &l.bias),
                _ => continue,
            };
            let l = mask.unit_len();
            for (u, &k) in mask.keep.iter().enumerate() {
                if !k {
                    total += w[u * l..(u + 1) * l].iter().map(|v| v.abs() as f64).sum::<f64>() + b[u].abs() as f64;
                }
            }
        }
        total
    }
}

/// Masks each prunable layer at its effective rate and records the choice.
pub fn extract_subgraph(base: &Network, state: &SparsitySearchState) -> Result<SubgraphSpec> {
    let gammas = state.normalized()?;
    let mut net = base.clone();
    let costs = per_layer_costs(base)?;
    let mut masks = Vec::new();
    let mut reports = Vec::new();
    for (ext, gamma) in state.layers.iter().zip(gammas) {
        let layer = &base.layers()[ext.layer];
        let zeta = effective_sparsity(&gamma, &ext.rates)?;
        let mask = generate_mask_l2(&unit_weights(layer).ok_or_else(|| structural!("layer {} is not prunable", ext.layer))?, zeta)?;
        mask_layer(&mut net.layers_mut()[ext.layer], &mask)?;
        let input = base.shape_at(ext.layer)?;
        reports.push(LayerExtraction {
            layer: ext.layer,
            kind: format!("{:?}", layer.kind()).to_lowercase(),
            candidates: ext.rates.clone(),
            gamma,
            effective_sparsity: zeta,
            units: mask.units(),
            zeroed_units: mask.zeroed_units(),
            pre_cost: costs[ext.layer],
            post_cost: pruned_layer_cost(costs[ext.layer], layer, &input, mask.zeroed_units())?,
        });
        masks.push((ext.layer, mask));
    }
    Ok(SubgraphSpec {
        truncate_at: net.split(),
        network: net,
        masks,
        layers: reports,
    })
}

/// Same subgraph shape with uniformly random masks at each layer's rate.
pub fn random_subgraph(base: &Network, reference: &SubgraphSpec, seed: u64) -> Result<SubgraphSpec> {
    let mut net = base.clone();
    let mut masks = Vec::new();
    for (k, (idx, m)) in reference.masks.iter().enumerate() {
        let w = unit_weights(&base.layers()[*idx]).ok_or_else(|| structural!("layer {} is not prunable", idx))?;
        let mask = generate_random_mask(&w, m.sparsity, seed.wrapping_mul(1000).wrapping_add(k as u64))?;
        mask_layer(&mut net.layers_mut()[*idx], &mask)?;
        masks.push((*idx, mask));
    }
    Ok(SubgraphSpec {
        network: net,
        masks,
        layers: reference.layers.clone(),
        truncate_at: reference.truncate_at,
    })
}

/// Physically removes dropped units and the input channels or features
/// that consumed them. The result computes the same function.
pub fn compact(net: &Network, masks: &[(usize, BinaryMask)]) -> Result<Network> {
    let mut layers = Vec::with_capacity(net.len());
    // kept entries of the current activation along its unit axis
    let mut keep_in: Option<Vec<bool>> = None;
    for (i, layer) in net.layers().iter().enumerate() {
        let out_keep = masks.iter().find(|(l, _)| *l == i).map(|(_, m)| m.keep.clone());
        let new = match layer {
            Layer::Conv2d(c) => {
                let ki = keep_in.clone().unwrap_or_else(|| vec![true; c.in_channels]);
                let ko = out_keep.clone().unwrap_or_else(|| vec![true; c.out_channels]);
                let kk = c.kernel * c.kernel;
                let ins: Vec<usize> = (0..c.in_channels).filter(|&j| ki[j]).collect();
                let outs: Vec<usize> = (0..c.out_channels).filter(|&o| ko[o]).collect();
                let mut weight = Vec::with_capacity(ins.len() * outs.len() * kk);
                for &o in &outs {
                    for &j in &ins {
                        let at = (o * c.in_channels + j) * kk;
                        weight.extend_from_slice(&c.weight[at..at + kk]);
                    }
                }
                keep_in = Some(ko);
                Layer::Conv2d(Conv2d {
                    in_channels: ins.len(),
                    out_channels: outs.len(),
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weight,
                    bias: outs.iter().map(|&o| c.bias[o]).collect(),
                })
            }
            Layer::Linear(l) => {
                let ki = keep_in.clone().unwrap_or_else(|| vec![true; l.in_features]);
                let ko = out_keep.clone().unwrap_or_else(|| vec![true; l.out_features]);
                let ins: Vec<usize> = (0..l.in_features).filter(|&j| ki[j]).collect();
                let outs: Vec<usize> = (0..l.out_features).filter(|&o| ko[o]).collect();
                let mut weight = Vec::with_capacity(ins.len() * outs.len());
                for &o in &outs {
                    for &j in &ins {
                        weight.push(l.weight[o * l.in_features + j]);
                    }
                }
                keep_in = Some(ko);
                Layer::Linear(Linear {
                    in_features: ins.len(),
                    out_features: outs.len(),
                    weight,
                    bias: outs.iter().map(|&o| l.bias[o]).collect(),
                })
            }
            Layer::Flatten => {
                if let Some(k) = keep_in.take() {
                    let shape = net.shape_at(i)?;
                    let hw: usize = shape[1..].iter().product();
                    keep_in = Some(k.iter().flat_map(|&b| std::iter::repeat_n(b, hw)).collect());
                }
                Layer::Flatten
            }
            Layer::Relu | Layer::MaxPool2d { .. } | Layer::AdaptiveAvgPool2d { .. } | Layer::GlobalAvgPool => layer.clone(),
            other => {
                if keep_in.as_ref().is_some_and(|k| k.iter().any(|&b| !b)) {
                    return Err(structural!("cannot compact through {:?}", other.kind()));
                }
                other.clone()
            }
        };
        layers.push(new);
    }
    Network::new(&net.name, net.input_shape(), layers, net.split())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_params: u64,
    pub max_macs: u64,
}

fn branch_cost(sub: &SubgraphSpec, end: usize) -> Result<(u64, u64)> {
    let mut s = sub.clone();
    s.truncate_at = end;
    let b = s.branch()?;
    Ok((count_params(&b)?, count_macs(&b, b.input_shape())?))
}

/// Drops trailing feature-extractor stages, deepest first, until the
/// compacted branch fits the budget.
pub fn truncate_tail(sub: &SubgraphSpec, budget: Budget) -> Result<SubgraphSpec> {
    if budget.max_params == 0 || budget.max_macs == 0 {
        return Err(domain!("budget must be positive"));
    }
    let ends = stage_ends(&sub.network);
    let mut candidates: Vec<usize> = ends.into_iter().filter(|&e| e <= sub.truncate_at).collect();
    if candidates.last() != Some(&sub.truncate_at) {
        candidates.push(sub.truncate_at);
    }
    for (k, &end) in candidates.iter().enumerate().rev() {
        let (p, m) = branch_cost(sub, end)?;
        if p <= budget.max_params && m <= budget.max_macs {
            let mut out = sub.clone();
            out.truncate_at = end;
            return Ok(out);
        }
        if k == 0 {
            return Err(Error::Budget(format!(
                "one stage still needs {p} params and {m} MACs, budget is {} and {}",
                budget.max_params, budget.max_macs
            )));
        }
    }
    Err(Error::Budget("subgraph has no feature-extractor stage".into()))
}

/// Writes the parameters of a [`compact`]ed network back into the masked
/// full-size `template`. Entries tied to dropped units keep their template
/// values.
pub fn expand(template: &Network, compacted: &Network, masks: &[(usize, BinaryMask)]) -> Result<Network> {
    if template.len() != compacted.len() {
        return Err(structural!("{} layers cannot expand into {}", compacted.len(), template.len()));
    }
    let mut out = template.clone();
    let mut keep_in: Option<Vec<bool>> = None;
    for i in 0..template.len() {
        let out_keep = masks.iter().find(|(l, _)| *l == i).map(|(_, m)| m.keep.clone());
        match (&mut out.layers_mut()[i], &compacted.layers()[i]) {
            (Layer::Conv2d(full), Layer::Conv2d(small)) => {
                let ki = keep_in.clone().unwrap_or_else(|| vec![true; full.in_channels]);
                let ko = out_keep.unwrap_or_else(|| vec![true; full.out_channels]);
                let kk = full.kernel * full.kernel;
                let ins: Vec<usize> = (0..full.in_channels).filter(|&j| ki[j]).collect();
                let outs: Vec<usize> = (0..full.out_channels).filter(|&o| ko[o]).collect();
                if small.in_channels != ins.len() || small.out_channels != outs.len() {
                    return Err(structural!("layer {} does not match its mask", i));
                }
                for (a, &o) in outs.iter().enumerate() {
                    for (b, &j) in ins.iter().enumerate() {
                        let (to, from) = ((o * full.in_channels + j) * kk, (a * ins.len() + b) * kk);
                        full.weight[to..to + kk].copy_from_slice(&small.weight[from..from + kk]);
                    }
                    full.bias[o] = small.bias[a];
                }
                keep_in = Some(ko);
            }
            (Layer::Linear(full), Layer::Linear(small)) => {
                let ki = keep_in.clone().unwrap_or_else(|| vec![true; full.in_features]);
                let ko = out_keep.unwrap_or_else(|| vec![true; full.out_features]);
                let ins: Vec<usize> = (0..full.in_features).filter(|&j| ki[j]).collect();
                let outs: Vec<usize> = (0..full.out_features).filter(|&o| ko[o]).collect();
                if small.in_features != ins.len() || small.out_features != outs.len() {
                    return Err(structural!("layer {} does not match its mask", i));
                }
                for (a, &o) in outs.iter().enumerate() {
                    for (b, &j) in ins.iter().enumerate() {
                        full.weight[o * full.in_features + j] = small.weight[a * ins.len() + b];
                    }
                    full.bias[o] = small.bias[a];
                }
                keep_in = Some(ko);
            }
            (Layer::Flatten, Layer::Flatten) => {
                if let Some(k) = keep_in.take() {
                    let hw: usize = template.shape_at(i)?[1..].iter().product();
                    keep_in = Some(k.iter().flat_map(|&b| std::iter::repeat_n(b, hw)).collect());
                }
            }
            // layers compact copies verbatim
            (full, small) if full.kind() == small.kind() => *full = small.clone(),
            _ => return Err(structural!("layer {} differs between template and compacted network", i)),
        }
    }
    Ok(out)
}

/// Fine-tunes the kept units. Training runs on the compacted network, which
/// computes the same function and receives the same gradients as the masked
/// one, so dropped units stay exactly zero.
pub fn fine_tune_subgraph(sub: &SubgraphSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(SubgraphSpec, Vec<EpochStats>)> {
    let mut small = compact(&sub.network, &sub.masks)?;
    let history = train_classifier(&mut small, data, cfg, |_, _| {})?;
    let mut out = sub.clone();
    out.network = expand(&sub.network, &small, &sub.masks)?;
    let mass = out.masked_weight_mass();
    if mass != 0.0 {
        return Err(Error::Consistency(format!("masked weights drifted to total magnitude {mass}")));
    }
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Normalization, SyntheticConfig};
    use crate::nn::arch::VggConfig;
    use crate::nn::train::{mean_loss, Augment};

    fn w(norms: &[f32]) -> Tensor {
        Tensor::from_vec(&[norms.len(), 1], norms.to_vec()).unwrap()
    }

    #[test]
    fn effective_sparsity_examples() {
        let r = [0.125, 0.25, 0.375];
        assert_eq!(effective_sparsity(&[1.0, 0.0, 0.0], &r).unwrap(), 0.125);
        assert_eq!(effective_sparsity(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.5);
        let z = effective_sparsity(&[0.2, 0.3, 0.5], &[0.125, 0.25, 0.5]).unwrap();
        assert!((z - 0.35).abs() < 1e-12);
        assert!(effective_sparsity(&[0.5, 0.5], &[0.1]).is_err());
        assert!(effective_sparsity(&[0.7, 0.7], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = normalize_coefficients(&[-0.2, 0.6, 0.2]).unwrap();
        for (a, b) in g.iter().zip([0.2, 0.6, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize_coefficients(&[1.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_coefficients(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(normalize_coefficients(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_mask_examples() {
        let m = generate_mask_l2(&w(&[4.0, 1.0, 3.0, 2.0]), 0.5).unwrap();
        assert_eq!(m.keep, vec![true, false, true, false]);
        let m = generate_mask_l2(&w(&[4.0, 1.0, 3.0, 2.0]), 0.0).unwrap();
        assert!(m.keep.iter().all(|&k| k));
        let m = generate_mask_l2(&w(&[1.0, 1.0, 2.0, 3.0]), 0.25).unwrap();
        assert_eq!(m.keep, vec![false, true, true, true]);
        assert!(matches!(generate_mask_l2(&w(&[1.0]), 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_mask_examples() {
        let wt = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(apply_mask(&wt, &m).unwrap().data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(apply_mask(&wt, &Tensor::full(&[2, 2], 1.0)).unwrap(), wt);
        assert!(apply_mask(&wt, &Tensor::zeros(&[2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&wt, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn mask_tensor_is_structured() {
        let wt = Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 0.1, 0.1, 2.0, 2.0]).unwrap();
        let m = generate_mask_l2(&wt, 0.34).unwrap();
        assert_eq!(m.to_tensor().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn random_mask_is_deterministic_and_exact() {
        let wt = w(&[1.0; 8]);
        let a = generate_random_mask(&wt, 0.375, 5).unwrap();
        assert_eq!(a, generate_random_mask(&wt, 0.375, 5).unwrap());
        assert_eq!(a.zeroed_units(), 3);
        assert!(generate_random_mask(&wt, 0.0, 1).unwrap().keep.iter().all(|&k| k));
    }

    #[test]
    fn pick_spreads_rates() {
        let r = SparsityCandidates::default().conv;
        assert_eq!(SparsityCandidates::pick(&r, 1).unwrap(), vec![0.125]);
        assert_eq!(SparsityCandidates::pick(&r, 3).unwrap(), vec![0.125, 0.5, 0.875]);
        assert!(matches!(SparsityCandidates::pick(&r, 8), Err(Error::Config(_))));
    }

    #[test]
    fn extraction_loss_examples() {
        let costs = vec![
            CostProfile { param_count: 0, mac_count: 100, mem_access_cost: 10 },
            CostProfile { param_count: 0, mac_count: 50, mem_access_cost: 5 },
        ];
        let state = SparsitySearchState {
            k: 2,
            layers: vec![ExtendedLayer {
                layer: 0,
                rates: vec![0.25, 0.5],
                masks: vec![BinaryMask::ones(&[2, 1]); 2],
                gamma: vec![0.6, 0.4],
                costs,
            }],
        };
        let v = extraction_loss(1.0, &state, 0.5, 1.0, 1e-5, 1e-7).unwrap();
        assert!((v - 0.500088).abs() < 1e-12);
        assert_eq!(extraction_loss(1.0, &state, 0.5, 0.0, 1e-5, 1e-7).unwrap(), 0.5);
        let mut zero = state.clone();
        zero.layers[0].gamma = vec![0.0, 0.0];
        assert_eq!(extraction_loss(1.3, &zero, 0.5, 1.0, 1e-5, 1e-7).unwrap(), 0.65);
    }

    fn toy_base(rng: &mut ChaCha8Rng) -> Network {
        VggConfig {
            name: "toy".into(),
            input_shape: vec![3, 8, 8],
            stages: vec![vec![4], vec![8]],
            batch_norm: false,
            head_hidden: vec![6],
            classes: 3,
        }
        .build(rng)
        .unwrap()
    }

    fn toy_input() -> Tensor {
        Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|v| (v * 37 % 23) as f32 / 11.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn single_branch_equals_base_with_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = toy_base(&mut rng);
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 1).unwrap();
        assert_eq!(ext.state.coefficient_count(), 3);
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let x = toy_input();
        let a = ext.forward(&x).unwrap();
        let b = sub.network.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn two_branch_combination_is_linear() {
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let layer = ExtendedLayer {
            layer: 0,
            rates: vec![0.5, 0.5],
            masks: vec![
                BinaryMask { shape: vec![2, 1], sparsity: 0.5, keep: vec![true, false] },
                BinaryMask { shape: vec![2, 1], sparsity: 0.5, keep: vec![false, true] },
            ],
            gamma: vec![0.6, 0.4],
            costs: vec![CostProfile::default(); 2],
        };
        let y = scale_units(&z, &layer.unit_scale());
        assert!((y.data()[0] - 0.6).abs() < 1e-7 && (y.data()[1] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn coefficient_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = toy_base(&mut rng);
        let mut ext = build_extended_network(&base, &SparsityCandidates::default(), 3).unwrap();
        for (s, l) in ext.state.layers.iter_mut().enumerate() {
            l.gamma = vec![0.5 + 0.1 * s as f64, 0.3, 0.2];
        }
        let x = toy_input();
        let labels = [0, 2];
        let trace = ext.trace(&x).unwrap();
        let (_, g) = cross_entropy(&trace.output, &labels, 0.0).unwrap();
        let grads = ext.coefficient_grads(&trace, &g).unwrap();
        for s in 0..ext.state.layers.len() {
            for j in 0..3 {
                let at = |d: f64| {
                    let mut e = ext.clone();
                    e.state.layers[s].gamma[j] += d;
                    cross_entropy(&e.forward(&x).unwrap(), &labels, 0.0).unwrap().0 as f64
                };
                let fd = (at(1e-3) - at(-1e-3)) / 2e-3;
                assert!((fd - grads[s][j]).abs() < 1e-2 * (1.0 + fd.abs()), "{s},{j}: {fd} vs {}", grads[s][j]);
            }
        }
    }

    #[test]
    fn masked_branch_weights_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = toy_base(&mut rng);
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 3).unwrap();
        let x = toy_input();
        let trace = ext.trace(&x).unwrap();
        let (_, g) = cross_entropy(&trace.output, &[1, 0], 0.0).unwrap();
        let grads = ext.branch_weight_grads(&trace, &g).unwrap();
        for (s, layer) in ext.state.layers.iter().enumerate() {
            for (j, m) in layer.masks.iter().enumerate() {
                let l = m.unit_len();
                for (u, &k) in m.keep.iter().enumerate() {
                    if !k {
                        assert!(grads[s][j][u * l..(u + 1) * l].iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_steps_leave_coefficients_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = toy_base(&mut rng);
        let mut ext = build_extended_network(&base, &SparsityCandidates::default(), 2).unwrap();
        let before = ext.state.clone();
        let data = generate_synthetic(&SyntheticConfig { train: 4, test: 1, ..Default::default() }, &Normalization::default())
            .unwrap()
            .0;
        let cfg = ExtractionConfig { epochs: 0, ..Default::default() };
        train_sparsity_coefficients(&mut ext, &data, &cfg).unwrap();
        assert_eq!(ext.state, before);
    }

    #[test]
    fn compaction_preserves_function_and_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = toy_base(&mut rng);
        let mut ext = build_extended_network(&base, &SparsityCandidates::default(), 2).unwrap();
        for l in &mut ext.state.layers {
            l.gamma = vec![0.5, 0.5];
        }
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let c = sub.compacted().unwrap();
        assert!(count_params(&c).unwrap() < count_params(&base).unwrap());
        assert!(count_macs(&c, &[3, 8, 8]).unwrap() < count_macs(&base, &[3, 8, 8]).unwrap());
        let x = toy_input();
        let (a, b) = (sub.network.forward(&x).unwrap(), c.forward(&x).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-5);
        }
        for r in &sub.layers {
            assert_eq!(r.zeroed_units, zero_unit_count(r.effective_sparsity, r.units).unwrap());
        }
    }

    #[test]
    fn truncation_follows_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = toy_base(&mut rng);
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 1).unwrap();
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let full = branch_cost(&sub, sub.truncate_at).unwrap();
        let ends = stage_ends(&sub.network);
        let one = branch_cost(&sub, ends[0]).unwrap();
        let t = truncate_tail(&sub, Budget { max_params: full.0, max_macs: full.1 }).unwrap();
        assert_eq!(t.truncate_at, sub.truncate_at);
        let t = truncate_tail(&sub, Budget { max_params: full.0 - 1, max_macs: full.1 }).unwrap();
        assert_eq!(t.truncate_at, ends[0]);
        assert_eq!(branch_cost(&t, t.truncate_at).unwrap(), one);
        assert!(matches!(
            truncate_tail(&sub, Budget { max_params: 1, max_macs: 1 }),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn fine_tuning_keeps_masked_weights_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = VggConfig::four_conv([4, 4], 10).build(&mut rng).unwrap();
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 2).unwrap();
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let data = generate_synthetic(&SyntheticConfig { train: 20, test: 1, ..Default::default() }, &Normalization::default())
            .unwrap()
            .0;
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (same, h) = fine_tune_subgraph(&sub, &data, &cfg).unwrap();
        assert!(h.is_empty());
        assert_eq!(same.network, sub.network);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            augment: Augment::default(),
            sgd: SgdConfig { lr: 0.01, weight_decay: 1e-3, ..Default::default() },
            ..Default::default()
        };
        let (tuned, _) = fine_tune_subgraph(&sub, &data, &cfg).unwrap();
        assert_eq!(tuned.masked_weight_mass(), 0.0);
        assert!(mean_loss(&tuned.network, &data).unwrap().is_finite());
    }

    #[test]
    fn expand_inverts_compact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = toy_base(&mut rng);
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 3).unwrap();
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let back = expand(&sub.network, &sub.compacted().unwrap(), &sub.masks).unwrap();
        assert_eq!(back, sub.network);
        assert!(expand(&base, &VggConfig::four_conv([2, 2], 3).build(&mut rng).unwrap(), &sub.masks).is_err());
    }

    #[test]
    fn compacted_training_matches_gated_masked_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = VggConfig::four_conv([4, 6], 10).build(&mut rng).unwrap();
        let ext = build_extended_network(&base, &SparsityCandidates::default(), 3).unwrap();
        let sub = extract_subgraph(&base, &ext.state).unwrap();
        let data = generate_synthetic(&SyntheticConfig { train: 40, test: 1, ..Default::default() }, &Normalization::default())
            .unwrap()
            .0;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            sgd: SgdConfig { lr: 0.01, ..Default::default() },
            ..Default::default()
        };
        let (tuned, _) = fine_tune_subgraph(&sub, &data, &cfg).unwrap();
        // reference: full-size training with dropped-unit gradients zeroed
        let mut gated = sub.network.clone();
        let masks = sub.masks.clone();
        train_classifier(&mut gated, &data, &cfg, |i, slots| {
            if let Some((_, m)) = masks.iter().find(|(l, _)| *l == i) {
                let l = m.unit_len();
                for u in (0..m.units()).filter(|&u| !m.keep[u]) {
                    slots[0][u * l..(u + 1) * l].fill(0.0);
                    slots[1][u] = 0.0;
                }
            }
        })
        .unwrap();
        let (a, b) = (tuned.network.named_params(), gated.named_params());
        for ((name, x, _), (_, y, _)) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= 1e-4 * (1.0 + v.abs()), "{name}: {u} vs {v}");
            }
        }
    }
}
