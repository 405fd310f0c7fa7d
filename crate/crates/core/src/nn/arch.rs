//! Desk-scale reference architectures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm2d, Conv2d, Layer, Linear};
use super::network::Network;
use crate::error::{structural, Result};

/// A VGG-style plain CNN: stages of `3x3` convs each closed by a `2x2` max
/// pool, followed by a fully connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggConfig {
    pub name: String,
    pub input_shape: Vec<usize>,
    /// Output channels of every conv, grouped by stage.
    pub stages: Vec<Vec<usize>>,
    pub batch_norm: bool,
    pub head_hidden: Vec<usize>,
    pub classes: usize,
}

impl VggConfig {
    /// Thirteen convs in five stages plus a three-layer head.
    pub fn vgg16_style(widths: [usize; 5], classes: usize) -> Self {
        let [a, b, c, d, e] = widths;
        VggConfig {
            name: "base".into(),
            input_shape: vec![3, 32, 32],
            stages: vec![vec![a, a], vec![b, b], vec![c, c, c], vec![d, d, d], vec![e, e, e]],
            batch_norm: true,
            head_hidden: vec![e, e],
            classes,
        }
    }

    /// Five convs, one per stage, plus a three-layer head and no batch norm.
    pub fn vgg8_style(widths: [usize; 5], classes: usize) -> Self {
        let [a, b, c, d, e] = widths;
        VggConfig {
            name: "edge".into(),
            input_shape: vec![3, 32, 32],
            stages: vec![vec![a], vec![b], vec![c], vec![d], vec![e]],
            batch_norm: false,
            head_hidden: vec![e, e],
            classes,
        }
    }

    /// Four convs in two stages with a single linear classifier.
    pub fn four_conv(widths: [usize; 2], classes: usize) -> Self {
        let [a, b] = widths;
        VggConfig {
            name: "small".into(),
            input_shape: vec![3, 32, 32],
            stages: vec![vec![a, a], vec![b, b]],
            batch_norm: false,
            head_hidden: vec![],
            classes,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network> {
        let [mut channels, mut h, mut w] = match self.input_shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(structural!("VGG input must be CxHxW, got {:?}", self.input_shape)),
        };
        let mut layers = Vec::new();
        for stage in &self.stages {
            for &out in stage {
                layers.push(Layer::Conv2d(Conv2d::new(rng, channels, out, 3, 1, 1)));
                if self.batch_norm {
                    layers.push(Layer::BatchNorm2d(BatchNorm2d::new(out)));
                }
                layers.push(Layer::Relu);
                channels = out;
            }
            layers.push(Layer::MaxPool2d { size: 2 });
            h /= 2;
            w /= 2;
        }
        let split = layers.len();
        layers.push(Layer::Flatten);
        let mut features = channels * h * w;
        for &hidden in &self.head_hidden {
            layers.push(Layer::Linear(Linear::new(rng, features, hidden)));
            layers.push(Layer::Relu);
            features = hidden;
        }
        layers.push(Layer::Linear(Linear::new(rng, features, self.classes)));
        Network::new(&self.name, &self.input_shape, layers, split)
    }
}

/// Layer index one past the end of each feature-extractor stage, where a
/// stage is a run of layers closed by a max pool (or by the split).
pub fn stage_ends(net: &Network) -> Vec<usize> {
    let mut ends = Vec::new();
    for (i, layer) in net.layers()[..net.split()].iter().enumerate() {
        if matches!(layer, Layer::MaxPool2d { .. }) {
            ends.push(i + 1);
        }
    }
    if ends.last() != Some(&net.split()) && net.split() > 0 {
        ends.push(net.split());
    }
    ends
}
