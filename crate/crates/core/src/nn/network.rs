use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerConfig, LayerSpec};
use crate::error::{structural, Result};
use crate::tensor::Tensor;

/// An ordered layer stack split into a feature extractor (`layers[..split]`)
/// and a classifier head (`layers[split..]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    split: usize,
}

/// Parameter-free description of a [`Network`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub split: usize,
    pub layers: Vec<LayerConfig>,
}

/// Layer inputs recorded during a forward pass, for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    start: usize,
    train: bool,
    inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl Trace {
    /// Input of the absolute layer index `layer`.
    pub fn input_of(&self, layer: usize) -> &Tensor {
        &self.inputs[layer - self.start]
    }

    /// Output of the absolute layer index `layer`.
    pub fn output_of(&self, layer: usize) -> &Tensor {
        let rel = layer - self.start;
        if rel + 1 < self.inputs.len() {
            &self.inputs[rel + 1]
        } else {
            &self.output
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.inputs.len()
    }
}

/// Per-layer parameter gradients, aligned with [`Network::layers`].
pub type ParamGrads = Vec<Vec<Vec<f32>>>;

impl Network {
    pub fn new(name: &str, input_shape: &[usize], layers: Vec<Layer>, split: usize) -> Result<Self> {
        if split > layers.len() {
            return Err(structural!("split {} beyond {} layers", split, layers.len()));
        }
        let net = Network {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
            split,
        };
        net.layer_specs()?;
        Ok(net)
    }

    pub fn from_arch<R: Rng + ?Sized>(arch: &NetworkArch, rng: &mut R) -> Result<Self> {
        let layers = arch.layers.iter().map(|c| Layer::from_config(c, rng)).collect();
        Network::new(&arch.name, &arch.input_shape, layers, arch.split)
    }

    pub fn arch(&self) -> NetworkArch {
        NetworkArch {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            split: self.split,
            layers: self.layers.iter().map(Layer::config).collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-layer specs, validating that adjacent layers fit together.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut shape = self.input_shape.clone();
        let mut specs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let spec = layer
                .spec(&shape)
                .map_err(|e| structural!("{} layer {}: {}", self.name, i, e))?;
            shape = spec.out_shape.clone();
            specs.push(spec);
        }
        Ok(specs)
    }

    /// Per-example shape entering layer `index` (`index == len` gives the output shape).
    pub fn shape_at(&self, index: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..index] {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Per-example scalar count of the feature-extractor output.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.shape_at(self.split)?.iter().product())
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.shape_at(self.layers.len())?.iter().product())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0..self.layers.len())
    }

    pub fn forward_range(&self, x: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers[range] {
            cur = layer.forward(&cur, false)?;
        }
        Ok(cur)
    }

    /// Feature-extractor output flattened to `N x d`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_range(x, 0..self.split)?.flatten())
    }

    /// Classifier head applied to `N x d` features.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let shape = self.shape_at(self.split)?;
        let mut full = vec![features.batch()];
        full.extend_from_slice(&shape);
        let f = features.clone().reshape(&full)?;
        self.forward_range(&f, self.split..self.layers.len())
    }

    pub fn trace(&self, x: &Tensor, train: bool) -> Result<Trace> {
        self.trace_range(x, 0..self.layers.len(), train)
    }

    pub fn trace_range(&self, x: &Tensor, range: std::ops::Range<usize>, train: bool) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(range.len());
        let mut cur = x.clone();
        for layer in &self.layers[range.clone()] {
            let next = layer.forward(&cur, train)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(Trace {
            start: range.start,
            train,
            inputs,
            output: cur,
        })
    }

    /// Backpropagates `grad_out` through every traced layer.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, want_params: bool) -> Result<(Tensor, ParamGrads)> {
        self.backward_to(trace, grad_out, trace.start, want_params)
    }

    /// Backpropagates through traced layers down to (and including) layer
    /// `stop`, returning the gradient with respect to that layer's input.
    pub fn backward_to(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        stop: usize,
        want_params: bool,
    ) -> Result<(Tensor, ParamGrads)> {
        let range = trace.range();
        if stop < range.start || stop > range.end {
            return Err(structural!("stop layer {} outside traced range {:?}", stop, range));
        }
        let mut grads: ParamGrads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for idx in (stop..range.end).rev() {
            let (dx, dp) = self.layers[idx].backward(trace.input_of(idx), &g, trace.train, want_params)?;
            grads[idx] = dp;
            g = dx;
        }
        Ok((g, grads))
    }

    /// Folds running batch statistics into training-mode state after a step.
    pub fn update_norm_stats(&mut self, trace: &Trace) -> Result<()> {
        for idx in trace.range() {
            if let Layer::BatchNorm2d(bn) = &mut self.layers[idx] {
                bn.update_running_stats(&trace.inputs[idx - trace.start])?;
            }
        }
        Ok(())
    }

    /// Merges each `conv -> batch norm` pair into a single conv using the
    /// running statistics. Inference output is unchanged.
    pub fn fold_batch_norm(&self) -> Result<Network> {
        let mut layers: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut split = self.split;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm2d(bn) = layer {
                match layers.last_mut() {
                    Some(Layer::Conv2d(conv)) => {
                        let fl = conv.filter_len();
                        for o in 0..conv.out_channels {
                            let inv = 1.0 / (bn.running_var[o] + bn.eps).sqrt();
                            let a = bn.gamma[o] * inv;
                            for w in &mut conv.weight[o * fl..(o + 1) * fl] {
                                *w *= a;
                            }
                            conv.bias[o] = a * (conv.bias[o] - bn.running_mean[o]) + bn.beta[o];
                        }
                        if i < self.split {
                            split -= 1;
                        }
                        continue;
                    }
                    _ => return Err(structural!("batch norm at layer {} does not follow a conv", i)),
                }
            }
            layers.push(layer.clone());
        }
        Network::new(&self.name, &self.input_shape, layers, split)
    }

    /// `(layer index, slot, parameter name, values, shape)` for every parameter slot.
    pub fn named_params(&self) -> Vec<(String, &[f32], Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, values, shape) in layer.params() {
                out.push((format!("{}.{}.{}", self.name, i, slot), values, shape));
            }
            for (slot, values) in layer.buffers() {
                out.push((format!("{}.{}.{}", self.name, i, slot), values, vec![values.len()]));
            }
        }
        out
    }

    /// Mutable views matching [`Network::named_params`] order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let name = self.name.clone();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let param_names: Vec<&'static str> = layer.params().iter().map(|p| p.0).collect();
            let buffer_names: Vec<&'static str> = layer.buffers().iter().map(|p| p.0).collect();
            let names: Vec<&'static str> = param_names.into_iter().chain(buffer_names).collect();
            let mut slots = layer_all_mut(layer);
            for (slot, values) in names.into_iter().zip(slots.drain(..)) {
                out.push((format!("{}.{}.{}", name, i, slot), values));
            }
        }
        out
    }

    /// Sibling network sharing name and input shape.
    pub fn with_layers(&self, layers: Vec<Layer>, split: usize) -> Result<Network> {
        Network::new(&self.name, &self.input_shape, layers, split)
    }
}

fn layer_all_mut(layer: &mut Layer) -> Vec<&mut Vec<f32>> {
    match layer {
        Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var],
        other => other.params_mut(),
    }
}
