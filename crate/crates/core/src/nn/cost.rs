//! Parameter, multiply-accumulate and memory-traffic accounting.
//!
//! MACs follow the multiply-add convention: one fused multiply-add per
//! weight application, so a `k x k` conv producing `Cout x Ho x Wo` outputs
//! from `Cin` channels costs `k^2 * Cin * Cout * Ho * Wo`. Bias additions,
//! pooling and activations are free. Memory traffic is weight reads plus
//! input reads plus output writes for one example.

use serde::{Deserialize, Serialize};

use super::layer::Layer;
use super::network::Network;
use crate::error::{structural, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostProfile {
    pub param_count: u64,
    pub mac_count: u64,
    pub mem_access_cost: u64,
}

impl std::ops::Add for CostProfile {
    type Output = CostProfile;
    fn add(self, o: CostProfile) -> CostProfile {
        CostProfile {
            param_count: self.param_count + o.param_count,
            mac_count: self.mac_count + o.mac_count,
            mem_access_cost: self.mem_access_cost + o.mem_access_cost,
        }
    }
}

impl std::iter::Sum for CostProfile {
    fn sum<I: Iterator<Item = CostProfile>>(iter: I) -> CostProfile {
        iter.fold(CostProfile::default(), |a, b| a + b)
    }
}

pub fn layer_params(layer: &Layer) -> u64 {
    match layer {
        Layer::Conv2d(c) => (c.weight.len() + c.bias.len()) as u64,
        Layer::Linear(l) => (l.weight.len() + l.bias.len()) as u64,
        Layer::BatchNorm2d(b) => 2 * b.channels as u64,
        Layer::SqueezeExcite(s) => (s.w1.len() + s.b1.len() + s.w2.len() + s.b2.len()) as u64,
        _ => 0,
    }
}

pub fn layer_macs(layer: &Layer, input: &[usize]) -> Result<u64> {
    let out = layer.out_shape(input)?;
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    Ok(match layer {
        Layer::Conv2d(c) => (c.filter_len() * c.out_channels * out[1] * out[2]) as u64,
        Layer::Linear(l) => (l.in_features * l.out_features) as u64,
        Layer::BatchNorm2d(_) => numel(input),
        // two gate matmuls plus one multiply-add per rescaled element
        Layer::SqueezeExcite(s) => (2 * s.channels * s.hidden) as u64 + numel(input),
        _ => 0,
    })
}

pub fn estimate_mem_access(layer: &Layer, input: &[usize]) -> Result<u64> {
    let out = layer.out_shape(input)?;
    if matches!(layer, Layer::Flatten) {
        return Ok(0);
    }
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    Ok(layer_params(layer) + numel(input) + numel(&out))
}

pub fn layer_cost(layer: &Layer, input: &[usize]) -> Result<CostProfile> {
    Ok(CostProfile {
        param_count: layer_params(layer),
        mac_count: layer_macs(layer, input)?,
        mem_access_cost: estimate_mem_access(layer, input)?,
    })
}

pub fn count_params(net: &Network) -> Result<u64> {
    net.layer_specs()?;
    Ok(net.layers().iter().map(layer_params).sum())
}

pub fn count_macs(net: &Network, input_shape: &[usize]) -> Result<u64> {
    if input_shape != net.input_shape() {
        return Err(structural!(
            "{} expects input {:?}, got {:?}",
            net.name,
            net.input_shape(),
            input_shape
        ));
    }
    Ok(per_layer_costs(net)?.iter().map(|c| c.mac_count).sum())
}

pub fn per_layer_costs(net: &Network) -> Result<Vec<CostProfile>> {
    let mut shape = net.input_shape().to_vec();
    let mut out = Vec::with_capacity(net.len());
    for layer in net.layers() {
        out.push(layer_cost(layer, &shape)?);
        shape = layer.out_shape(&shape)?;
    }
    Ok(out)
}

/// Whole-network cost over a layer range.
pub fn range_cost(net: &Network, range: std::ops::Range<usize>) -> Result<CostProfile> {
    Ok(per_layer_costs(net)?[range].iter().copied().sum())
}

pub fn network_cost(net: &Network) -> Result<CostProfile> {
    range_cost(net, 0..net.len())
}
