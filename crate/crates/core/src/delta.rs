//! The Y-shaped DELTA network.
//!
//! The subgraph branch maps the image to a feature map that is refined by a
//! squeeze-excitation block with a skip connection, globally pooled and
//! linearly reduced to `d_s`. The edge feature map is pooled and projected
//! to `d_f` (giving `F_E`). A two-layer perceptron maps `[reduced, F_E]` to
//! `F_delta`, and the frozen base head classifies `(F_E + F_delta) / 2`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{structural, Error, Result};
use crate::nn::cost::{network_cost, CostProfile};
use crate::nn::arch::stage_ends;
use crate::nn::layer::{Layer, Linear, SqueezeExcite};
use crate::nn::network::{Network, ParamGrads, Trace};
use crate::sparsity::SubgraphSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub se_reduction: usize,
    /// Width `d_s` of the reduced subgraph feature; 0 means `d_f`.
    pub reducer_dim: usize,
    /// Spatial size the edge map is pooled to before projection.
    pub edge_pool: usize,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig {
            se_reduction: 4,
            reducer_dim: 0,
            edge_pool: 1,
        }
    }
}

/// `x + x * gate(x)` with `gate = sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
pub fn se_refine(se: &SqueezeExcite, x: &Tensor) -> Result<Tensor> {
    Layer::SqueezeExcite(se.clone()).forward(x, false)
}

pub use crate::nn::layer::global_avg_pool;

/// Rounded geometric mean of the resizer's input and output widths.
pub fn resizer_hidden(input: usize, output: usize) -> usize {
    ((input as f64 * output as f64).sqrt().round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaNetwork {
    /// Compacted, truncated subgraph of the base feature extractor.
    pub branch: Network,
    /// Squeeze-excitation, global pool and linear reduction.
    pub refiner: Network,
    /// Pooling and projection of the edge feature map.
    pub adapter: Network,
    /// Two-layer perceptron producing `F_delta`.
    pub resizer: Network,
}

/// The four feature batches of one forward pass, all `N x d_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionFeatures {
    pub f_b: Tensor,
    pub f_e: Tensor,
    pub f_delta: Tensor,
    pub f_fused: Tensor,
}

pub struct DeltaTrace {
    pub branch: Trace,
    pub refiner: Trace,
    pub adapter: Trace,
    pub resizer: Trace,
}

impl DeltaTrace {
    pub fn f_e(&self) -> &Tensor {
        &self.adapter.output
    }

    pub fn f_delta(&self) -> &Tensor {
        &self.resizer.output
    }

    /// Refined (post squeeze-excitation) subgraph map.
    pub fn refined_map(&self) -> &Tensor {
        self.refiner.output_of(0)
    }
}

#[derive(Clone, Debug)]
pub struct DeltaGrads {
    pub branch: ParamGrads,
    pub refiner: ParamGrads,
    pub adapter: ParamGrads,
    pub resizer: ParamGrads,
    /// Gradient at the refined map, for activation maps.
    pub refined_map: Tensor,
}

/// `(F_E + F_delta) / 2`.
pub fn fuse(f_e: &Tensor, f_delta: &Tensor) -> Result<Tensor> {
    if f_e.shape() != f_delta.shape() {
        return Err(structural!("cannot fuse {:?} with {:?}", f_e.shape(), f_delta.shape()));
    }
    f_e.zip_map(f_delta, |a, b| (a + b) / 2.0)
}

/// Fused features classified by the base head; the head is only read.
pub fn fuse_and_classify(f_e: &Tensor, f_delta: &Tensor, base: &Network) -> Result<Tensor> {
    let fused = fuse(f_e, f_delta)?;
    let d_f = base.feature_dim()?;
    if fused.item_len() != d_f {
        return Err(structural!("fused width {} differs from base head input {}", fused.item_len(), d_f));
    }
    base.head(&fused)
}

/// Edge feature-extractor output, the adapter's input.
pub fn edge_feature_map(edge: &Network, x: &Tensor) -> Result<Tensor> {
    edge.forward_range(x, 0..edge.split())
}

/// Flattened `N x d` adapter output for a given projection.
pub fn adapt_edge_features(adapter: &Network, edge_map: &Tensor) -> Result<Tensor> {
    adapter.forward(edge_map)
}

impl DeltaNetwork {
    /// Wires a DELTA network around a branch for the given base and edge.
    pub fn assemble<R: Rng + ?Sized>(branch: Network, base: &Network, edge: &Network, cfg: &DeltaConfig, rng: &mut R) -> Result<Self> {
        if branch.input_shape() != base.input_shape() || edge.input_shape() != base.input_shape() {
            return Err(structural!("base, edge and branch must share an input shape"));
        }
        let map = branch.shape_at(branch.len())?;
        let [c, _, _] = map[..] else {
            return Err(structural!("branch must end in a CxHxW map, got {:?}", map));
        };
        if cfg.se_reduction == 0 || c < cfg.se_reduction {
            return Err(Error::Config(format!(
                "branch has {} channels, fewer than the reduction ratio {}",
                c, cfg.se_reduction
            )));
        }
        let d_f = base.feature_dim()?;
        let d_s = if cfg.reducer_dim == 0 { d_f } else { cfg.reducer_dim };
        let refiner = Network::new(
            "delta-refiner",
            &map,
            vec![
                Layer::SqueezeExcite(SqueezeExcite::new(rng, c, c / cfg.se_reduction)),
                Layer::GlobalAvgPool,
                Layer::Linear(Linear::new(rng, c, d_s)),
            ],
            3,
        )?;
        let edge_map = edge.shape_at(edge.split())?;
        let [ec, _, _] = edge_map[..] else {
            return Err(structural!("edge features must be a CxHxW map, got {:?}", edge_map));
        };
        let p = cfg.edge_pool.max(1);
        let adapter = Network::new(
            "delta-adapter",
            &edge_map,
            vec![
                Layer::AdaptiveAvgPool2d { out: p },
                Layer::Flatten,
                Layer::Linear(Linear::new(rng, ec * p * p, d_f)),
            ],
            3,
        )?;
        let hidden = resizer_hidden(d_s + d_f, d_f);
        let resizer = Network::new(
            "delta-resizer",
            &[d_s + d_f],
            vec![
                Layer::Linear(Linear::new(rng, d_s + d_f, hidden)),
                Layer::Relu,
                Layer::Linear(Linear::new(rng, hidden, d_f)),
            ],
            3,
        )?;
        let mut branch = branch;
        branch.name = "delta-branch".into();
        Ok(DeltaNetwork {
            branch,
            refiner,
            adapter,
            resizer,
        })
    }

    pub fn from_subgraph<R: Rng + ?Sized>(sub: &SubgraphSpec, base: &Network, edge: &Network, cfg: &DeltaConfig, rng: &mut R) -> Result<Self> {
        Self::assemble(sub.branch()?, base, edge, cfg, rng)
    }

    pub fn d_f(&self) -> Result<usize> {
        self.resizer.output_dim()
    }

    pub fn components(&self) -> [&Network; 4] {
        [&self.branch, &self.refiner, &self.adapter, &self.resizer]
    }

    pub fn components_mut(&mut self) -> [&mut Network; 4] {
        [&mut self.branch, &mut self.refiner, &mut self.adapter, &mut self.resizer]
    }

    /// Cost of every DELTA-owned module (the base head is shared, not owned).
    pub fn cost(&self) -> Result<CostProfile> {
        Ok(self.components().iter().map(|n| network_cost(n)).collect::<Result<Vec<_>>>()?.into_iter().sum())
    }

    pub fn trace(&self, x: &Tensor, edge_map: &Tensor) -> Result<DeltaTrace> {
        let branch = self.branch.trace(x, false)?;
        let refiner = self.refiner.trace(&branch.output, false)?;
        let adapter = self.adapter.trace(edge_map, false)?;
        let joined = Tensor::concat_features(&refiner.output, &adapter.output)?;
        let resizer = self.resizer.trace(&joined, false)?;
        Ok(DeltaTrace {
            branch,
            refiner,
            adapter,
            resizer,
        })
    }

    /// `(F_E, F_delta)` for a batch.
    pub fn features(&self, x: &Tensor, edge_map: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.trace(x, edge_map)?;
        Ok((t.adapter.output, t.resizer.output))
    }

    /// All four feature batches; `f_b` comes from the frozen base.
    pub fn fusion_features(&self, base: &Network, x: &Tensor, edge_map: &Tensor) -> Result<FusionFeatures> {
        let (f_e, f_delta) = self.features(x, edge_map)?;
        let f_fused = fuse(&f_e, &f_delta)?;
        Ok(FusionFeatures {
            f_b: base.features(x)?,
            f_e,
            f_delta,
            f_fused,
        })
    }

    pub fn logits(&self, base: &Network, x: &Tensor, edge_map: &Tensor) -> Result<Tensor> {
        let (f_e, f_delta) = self.features(x, edge_map)?;
        fuse_and_classify(&f_e, &f_delta, base)
    }

    /// Backpropagates gradients given at `F_E` and `F_delta`.
    pub fn backward(&self, t: &DeltaTrace, d_fe: &Tensor, d_fdelta: &Tensor, want_params: bool) -> Result<DeltaGrads> {
        let (d_join, resizer) = self.resizer.backward(&t.resizer, d_fdelta, want_params)?;
        let d_s = t.refiner.output.item_len();
        let (d_reduced, d_fe_extra) = d_join.split_features(d_s)?;
        let mut d_fe_total = d_fe.clone();
        d_fe_total.add_assign(&d_fe_extra)?;
        let (_, adapter) = self.adapter.backward(&t.adapter, &d_fe_total, want_params)?;
        // stop at the pool so the gradient at the refined map is available
        let (refined_map, mut refiner) = self.refiner.backward_to(&t.refiner, &d_reduced, 1, want_params)?;
        let (d_branch_out, se_grads) = self.refiner.layers()[0].backward(t.refiner.input_of(0), &refined_map, false, want_params)?;
        refiner[0] = se_grads;
        let branch = if self.branch.is_empty() {
            Vec::new()
        } else {
            self.branch.backward(&t.branch, &d_branch_out, want_params)?.1
        };
        Ok(DeltaGrads {
            branch,
            refiner,
            adapter,
            resizer,
            refined_map,
        })
    }
}

/// Whether `param(D) + param(E) < param(B)` and likewise for MACs.
pub fn within_budget(delta: &CostProfile, edge: &CostProfile, base: &CostProfile) -> bool {
    delta.param_count + edge.param_count < base.param_count && delta.mac_count + edge.mac_count < base.mac_count
}

/// Assembles from the deepest subgraph cut whose DELTA, together with the
/// edge model, stays cheaper than the base. Every attempt initializes from
/// the same seed, so the result does not depend on how many cuts were tried.
pub fn assemble_within_budget(
    sub: &SubgraphSpec,
    base: &Network,
    edge: &Network,
    cfg: &DeltaConfig,
    seed: u64,
) -> Result<(DeltaNetwork, SubgraphSpec)> {
    let base_cost = network_cost(base)?;
    let edge_cost = network_cost(edge)?;
    let mut ends: Vec<usize> = stage_ends(&sub.network).into_iter().filter(|&e| e <= sub.truncate_at).collect();
    ends.reverse();
    let mut last_err = None;
    for end in ends {
        let mut s = sub.clone();
        s.truncate_at = end;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        match DeltaNetwork::from_subgraph(&s, base, edge, cfg, &mut rng) {
            Ok(d) => {
                let cost = d.cost()?;
                if within_budget(&cost, &edge_cost, &base_cost) {
                    return Ok((d, s));
                }
                last_err = Some(Error::Budget(format!(
                    "cut at layer {}: DELTA {}+{} params / {}+{} MACs against base {} / {}",
                    end, cost.param_count, edge_cost.param_count, cost.mac_count, edge_cost.mac_count, base_cost.param_count, base_cost.mac_count
                )));
            }
            Err(e @ Error::Config(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Budget("subgraph has no feature-extractor stage".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::VggConfig;
    use crate::nn::cost::count_params;
    use crate::nn::layer::sigmoid;
    use rand_chacha::ChaCha8Rng;

    fn pair(rng: &mut ChaCha8Rng) -> (Network, Network) {
        let base = VggConfig::vgg16_style([8, 8, 16, 16, 16], 10).build(rng).unwrap().fold_batch_norm().unwrap();
        let edge = VggConfig::vgg8_style([4, 4, 8, 8, 8], 10).build(rng).unwrap();
        (base, edge)
    }

    fn first_stage(base: &Network) -> Network {
        let end = crate::nn::arch::stage_ends(base)[0];
        Network::new("b", base.input_shape(), base.layers()[..end].to_vec(), end).unwrap()
    }

    fn images(n: usize) -> Tensor {
        Tensor::from_vec(&[n, 3, 32, 32], (0..n * 3072).map(|v| ((v * 131 % 97) as f32 / 48.0) - 1.0).collect()).unwrap()
    }

    #[test]
    fn se_with_closed_gate_is_identity_and_open_gate_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut se = SqueezeExcite::new(&mut rng, 4, 1);
        let x = Tensor::from_vec(&[1, 4, 2, 2], (0..16).map(|v| v as f32 * 0.1 - 0.5).collect()).unwrap();
        se.w1.fill(0.0);
        se.w2.fill(0.0);
        se.b2.fill(-50.0);
        let y = se_refine(&se, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        se.b2.fill(50.0);
        let y = se_refine(&se, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn se_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let se = SqueezeExcite::new(&mut rng, 4, 2);
        let x = Tensor::from_vec(&[1, 4, 2, 2], (0..16).map(|v| ((v * 7 % 5) as f32) * 0.3 - 0.6).collect()).unwrap();
        let y = se_refine(&se, &x).unwrap();
        let xs = x.data();
        let pooled: Vec<f32> = (0..4).map(|c| xs[c * 4..c * 4 + 4].iter().sum::<f32>() / 4.0).collect();
        let mut hidden = [0.0f32; 2];
        for h in 0..2 {
            let mut s = se.b1[h];
            for c in 0..4 {
                s += se.w1[h * 4 + c] * pooled[c];
            }
            hidden[h] = s.max(0.0);
        }
        for c in 0..4 {
            let mut s = se.b2[c];
            for h in 0..2 {
                s += se.w2[c * 2 + h] * hidden[h];
            }
            let gate = sigmoid(s);
            for k in 0..4 {
                let expect = xs[c * 4 + k] + xs[c * 4 + k] * gate;
                assert!((y.data()[c * 4 + k] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn too_few_channels_for_reduction_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (base, edge) = pair(&mut rng);
        let cfg = DeltaConfig { se_reduction: 16, ..Default::default() };
        assert!(matches!(
            DeltaNetwork::assemble(first_stage(&base), &base, &edge, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adapter_zero_projection_gives_zeros_and_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (base, edge) = pair(&mut rng);
        let mut d = DeltaNetwork::assemble(first_stage(&base), &base, &edge, &DeltaConfig::default(), &mut rng).unwrap();
        let x = images(2);
        let map = edge_feature_map(&edge, &x).unwrap();
        let f = adapt_edge_features(&d.adapter, &map).unwrap();
        let Layer::Linear(l) = &d.adapter.layers()[2] else { panic!() };
        let pooled = crate::nn::layer::global_avg_pool(&map).unwrap();
        for n in 0..2 {
            for o in 0..l.out_features {
                let mut s = l.bias[o] as f64;
                for i in 0..l.in_features {
                    s += l.weight[o * l.in_features + i] as f64 * pooled.item(n)[i] as f64;
                }
                assert!((f.item(n)[o] as f64 - s).abs() < 1e-5);
            }
        }
        if let Layer::Linear(l) = &mut d.adapter.layers_mut()[2] {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        assert!(adapt_edge_features(&d.adapter, &map).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_resizer_gives_bias_and_examples_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (base, edge) = pair(&mut rng);
        let mut d = DeltaNetwork::assemble(first_stage(&base), &base, &edge, &DeltaConfig::default(), &mut rng).unwrap();
        let x = images(8);
        let map = edge_feature_map(&edge, &x).unwrap();
        let (_, full) = d.features(&x, &map).unwrap();
        let (_, one) = d.features(&x.select(&[5]), &map.select(&[5])).unwrap();
        assert_eq!(one.item(0), full.item(5));
        let (_, again) = d.features(&x, &map).unwrap();
        assert_eq!(again, full);
        if let Layer::Linear(l) = &mut d.resizer.layers_mut()[2] {
            l.weight.fill(0.0);
            l.bias = (0..l.out_features).map(|i| i as f32).collect();
        }
        let (_, f) = d.features(&x, &map).unwrap();
        for n in 0..8 {
            assert_eq!(f.item(n), (0..f.item_len()).map(|i| i as f32).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (base, _) = pair(&mut rng);
        let d_f = base.feature_dim().unwrap();
        let f_e = Tensor::from_vec(&[2, d_f], (0..2 * d_f).map(|v| v as f32 * 0.01).collect()).unwrap();
        assert_eq!(fuse(&f_e, &f_e).unwrap(), f_e);
        let neg = f_e.scale(-1.0);
        let zero_logits = fuse_and_classify(&f_e, &neg, &base).unwrap();
        let head0 = base.head(&Tensor::zeros(&[2, d_f])).unwrap();
        assert_eq!(zero_logits, head0);
        let f_d = f_e.map(|v| (v * 13.0).sin());
        let logits = fuse_and_classify(&f_e, &f_d, &base).unwrap();
        let mean: Vec<f32> = f_e.data().iter().zip(f_d.data()).map(|(a, b)| (a + b) / 2.0).collect();
        let expect = base.head(&Tensor::from_vec(&[2, d_f], mean).unwrap()).unwrap();
        for (a, b) in logits.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(fuse(&f_e, &Tensor::zeros(&[2, d_f + 1])).is_err());
    }

    #[test]
    fn delta_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (base, edge) = pair(&mut rng);
        let d = DeltaNetwork::assemble(first_stage(&base), &base, &edge, &DeltaConfig::default(), &mut rng).unwrap();
        let x = images(2);
        let map = edge_feature_map(&edge, &x).unwrap();
        let d_f = d.d_f().unwrap();
        let r_e: Vec<f32> = (0..2 * d_f).map(|v| ((v * 17 % 11) as f32 / 5.0) - 1.0).collect();
        let r_d: Vec<f32> = (0..2 * d_f).map(|v| ((v * 29 % 13) as f32 / 6.0) - 1.0).collect();
        let objective = |dn: &DeltaNetwork| -> f64 {
            let (fe, fd) = dn.features(&x, &map).unwrap();
            fe.data().iter().zip(&r_e).chain(fd.data().iter().zip(&r_d)).map(|(a, b)| (a * b) as f64).sum()
        };
        let t = d.trace(&x, &map).unwrap();
        let g = d
            .backward(
                &t,
                &Tensor::from_vec(&[2, d_f], r_e.clone()).unwrap(),
                &Tensor::from_vec(&[2, d_f], r_d.clone()).unwrap(),
                true,
            )
            .unwrap();
        let grads = [&g.branch, &g.refiner, &g.adapter, &g.resizer];
        let (mut checked, mut bad) = (0, 0);
        for c in 0..4 {
            for li in 0..d.components()[c].len() {
                for si in 0..d.components()[c].layers()[li].params().len() {
                    let n = d.components()[c].layers()[li].params()[si].1.len();
                    for k in (0..n).step_by((n / 5).max(1)) {
                        let bump = |h: f32| {
                            let mut dn = d.clone();
                            dn.components_mut()[c].layers_mut()[li].params_mut()[si][k] += h;
                            objective(&dn)
                        };
                        let fd = (bump(1e-3) - bump(-1e-3)) / 2e-3;
                        let an = grads[c][li][si][k] as f64;
                        checked += 1;
                        if (fd - an).abs() > 1e-2 * (1.0 + fd.abs()) {
                            bad += 1;
                        }
                    }
                }
            }
        }
        // allow a few relu kinks
        assert!(bad * 20 <= checked, "{bad} of {checked} gradients disagree");
    }

    #[test]
    fn delta_cost_counts_owned_modules_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (base, edge) = pair(&mut rng);
        let d = DeltaNetwork::assemble(first_stage(&base), &base, &edge, &DeltaConfig::default(), &mut rng).unwrap();
        let total: u64 = d.components().iter().map(|n| count_params(n).unwrap()).sum();
        assert_eq!(d.cost().unwrap().param_count, total);
    }

    #[test]
    fn budget_assembly_respects_the_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = VggConfig::vgg16_style([16, 16, 32, 32, 32], 10).build(&mut rng).unwrap().fold_batch_norm().unwrap();
        let edge = VggConfig::vgg8_style([4, 8, 16, 16, 16], 10).build(&mut rng).unwrap();
        let state = crate::sparsity::build_extended_network(&base, &Default::default(), 3).unwrap().state;
        let sub = crate::sparsity::extract_subgraph(&base, &state).unwrap();
        let (d, s) = assemble_within_budget(&sub, &base, &edge, &DeltaConfig::default(), 1).unwrap();
        let (b, e) = (network_cost(&base).unwrap(), network_cost(&edge).unwrap());
        assert!(within_budget(&d.cost().unwrap(), &e, &b));
        assert!(s.truncate_at <= sub.truncate_at);
        let (d2, _) = assemble_within_budget(&sub, &base, &edge, &DeltaConfig::default(), 1).unwrap();
        assert_eq!(d, d2);
        // an edge as large as the base leaves no room
        assert!(matches!(assemble_within_budget(&sub, &base, &base, &DeltaConfig::default(), 1), Err(Error::Budget(_))));
    }
}
