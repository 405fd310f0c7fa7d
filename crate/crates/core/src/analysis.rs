//! Activation maps, region geometry and the per-image explanation records.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::{rle_encode, Annotation, BBox, LabeledDataset};
use crate::delta::{edge_feature_map, fuse, DeltaNetwork};
use crate::error::{domain, structural, Error, Result};
use crate::nn::layer::Layer;
use crate::nn::network::Network;
use crate::tensor::Tensor;
use crate::training::{complementary_subset, map_dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Edge,
    Delta,
    Base,
}

/// A class activation map normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source: Source,
    pub class: usize,
}

const CAM_EPS: f32 = 1e-7;

/// GradCAM++ channel weights for one `K x h x w` activation/gradient pair.
pub fn gradcam_pp_weights(acts: &[f32], grads: &[f32], channels: usize) -> Vec<f32> {
    let hw = acts.len() / channels;
    (0..channels)
        .map(|k| {
            let a = &acts[k * hw..(k + 1) * hw];
            let g = &grads[k * hw..(k + 1) * hw];
            let sum_a: f32 = a.iter().sum();
            g.iter()
                .map(|&g| {
                    if g == 0.0 {
                        return 0.0;
                    }
                    let (g2, g3) = (g * g, g * g * g);
                    let alpha = g2 / (2.0 * g2 + sum_a * g3 + CAM_EPS);
                    alpha * g.max(0.0)
                })
                .sum()
        })
        .collect()
}

/// Half-pixel-centred bilinear resize of one `h x w` plane.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |o: usize, n: usize, on: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (s - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bot, fy));
        }
    }
    out
}

/// Min-max normalization; a constant positive plane maps to ones and a
/// zero plane stays zero.
pub fn normalize_map(values: &mut [f32]) {
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    if max > min {
        for v in values.iter_mut() {
            *v = ((*v - min) / (max - min)).clamp(0.0, 1.0);
        }
    } else {
        let fill = if max > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

/// Rectified weighted channel sum, upsampled and normalized.
pub fn cam_from_activations(
    acts: &[f32],
    grads: &[f32],
    shape: [usize; 3],
    out: (usize, usize),
    source: Source,
    class: usize,
) -> ActivationMap {
    let [k, h, w] = shape;
    let weights = gradcam_pp_weights(acts, grads, k);
    let mut cam = vec![0f32; h * w];
    for (ch, wk) in weights.iter().enumerate() {
        for (c, a) in cam.iter_mut().zip(&acts[ch * h * w..(ch + 1) * h * w]) {
            *c += wk * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = resize_bilinear(&cam, h, w, out.0, out.1);
    normalize_map(&mut values);
    ActivationMap {
        height: out.0,
        width: out.1,
        values,
        source,
        class,
    }
}

/// Index of the layer whose output is the final conv feature map: the last
/// conv, or the activation directly after it.
pub fn cam_target_layer(net: &Network) -> Result<usize> {
    let feats = &net.layers()[..net.split()];
    let conv = feats
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or_else(|| structural!("{} has no conv layer to explain", net.name))?;
    let mut t = conv;
    while t + 1 < feats.len() && matches!(feats[t + 1], Layer::Relu | Layer::BatchNorm2d(_)) {
        t += 1;
    }
    Ok(t)
}

fn one_hot(batch: usize, width: usize, classes: &[usize]) -> Result<Tensor> {
    let mut g = Tensor::zeros(&[batch, width]);
    for (i, &c) in classes.iter().enumerate() {
        if c >= width {
            return Err(domain!("class {} outside {} logits", c, width));
        }
        g.item_mut(i)[c] = 1.0;
    }
    Ok(g)
}

fn maps_from(acts: &Tensor, grads: &Tensor, out: (usize, usize), source: Source, classes: &[usize]) -> Result<Vec<ActivationMap>> {
    let (_, k, h, w) = acts.dims4()?;
    Ok((0..acts.batch())
        .map(|i| cam_from_activations(acts.item(i), grads.item(i), [k, h, w], out, source, classes[i]))
        .collect())
}

/// GradCAM++ for a plain network over a batch, one target class per image.
pub fn compute_cams(net: &Network, x: &Tensor, classes: &[usize], source: Source) -> Result<Vec<ActivationMap>> {
    let target = cam_target_layer(net)?;
    let (_, _, h, w) = x.dims4()?;
    let trace = net.trace(x, false)?;
    let g = one_hot(x.batch(), trace.output.item_len(), classes)?;
    let (grads, _) = net.backward_to(&trace, &g, target + 1, false)?;
    maps_from(trace.output_of(target), &grads, (h, w), source, classes)
}

pub fn compute_cam(net: &Network, image: &Tensor, class: usize, source: Source) -> Result<ActivationMap> {
    Ok(compute_cams(net, image, &[class], source)?.remove(0))
}

/// GradCAM++ on the refined DELTA map, with the class score taken from the
/// base head applied to the fused features.
pub fn compute_delta_cams(delta: &DeltaNetwork, base: &Network, edge: &Network, x: &Tensor, classes: &[usize]) -> Result<Vec<ActivationMap>> {
    let (_, _, h, w) = x.dims4()?;
    let t = delta.trace(x, &edge_feature_map(edge, x)?)?;
    let fused = fuse(t.f_e(), t.f_delta())?;
    let mut head_in = vec![x.batch()];
    head_in.extend(base.shape_at(base.split())?);
    let head = base.trace_range(&fused.reshape(&head_in)?, base.split()..base.len(), false)?;
    let g = one_hot(x.batch(), head.output.item_len(), classes)?;
    let (d_fused, _) = base.backward_to(&head, &g, base.split(), false)?;
    let d_fused = d_fused.flatten();
    let d_fd = d_fused.scale(0.5);
    let grads = delta.backward(&t, &Tensor::zeros(d_fused.shape()), &d_fd, false)?;
    maps_from(t.refined_map(), &grads.refined_map, (h, w), Source::Delta, classes)
}

/// 4-connected components of a thresholded map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub threshold: f32,
    pub height: usize,
    pub width: usize,
    /// Each component as a row-major membership mask.
    pub regions: Vec<Vec<bool>>,
}

impl RegionSet {
    pub fn union(&self) -> Vec<bool> {
        let mut u = vec![false; self.height * self.width];
        for r in &self.regions {
            for (a, &b) in u.iter_mut().zip(r) {
                *a |= b;
            }
        }
        u
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// The component with the most pixels (first on ties).
    pub fn largest(&self) -> Option<&Vec<bool>> {
        let mut best: Option<(&Vec<bool>, usize)> = None;
        for r in &self.regions {
            let n = r.iter().filter(|&&b| b).count();
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((r, n));
            }
        }
        best.map(|b| b.0)
    }
}

/// Components are ordered by their first pixel in raster order.
pub fn segment_regions(map: &ActivationMap, tau: f32) -> Result<RegionSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(domain!("segmentation threshold must lie in (0, 1), got {}", tau));
    }
    let (h, w) = (map.height, map.width);
    let on: Vec<bool> = map.values.iter().map(|&v| v >= tau).collect();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        let mut region = vec![false; h * w];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            region[p] = true;
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        regions.push(region);
    }
    Ok(RegionSet {
        threshold: tau,
        height: h,
        width: w,
        regions,
    })
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

fn intersection(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count()
}

/// `|edge ∩ delta| / |delta|` over region unions.
pub fn overlap_score(edge: &RegionSet, delta: &RegionSet) -> Result<f64> {
    overlap_of_masks(&edge.union(), &delta.union())
}

pub fn overlap_of_masks(edge: &[bool], delta: &[bool]) -> Result<f64> {
    let d = count(delta);
    if d == 0 {
        return Err(Error::UndefinedScore("DELTA has no activation region".into()));
    }
    Ok(intersection(edge, delta) as f64 / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicMetrics {
    pub jaccard: f64,
    pub dice: f64,
    pub overlap_coefficient: f64,
}

pub fn classic_metrics(edge: &RegionSet, delta: &RegionSet) -> Result<ClassicMetrics> {
    set_metrics(&edge.union(), &delta.union())
}

pub fn set_metrics(a: &[bool], b: &[bool]) -> Result<ClassicMetrics> {
    let (na, nb, i) = (count(a), count(b), intersection(a, b));
    if na == 0 && nb == 0 {
        return Err(Error::UndefinedScore("both region unions are empty".into()));
    }
    let union = na + nb - i;
    let min = na.min(nb);
    Ok(ClassicMetrics {
        jaccard: i as f64 / union as f64,
        dice: 2.0 * i as f64 / (na + nb) as f64,
        overlap_coefficient: if min == 0 { 0.0 } else { i as f64 / min as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeometricCategory {
    LocalComplement,
    LocalEnhancement,
    LocalMix,
    GlobalComplement,
    GlobalEnhancement,
    GlobalMix,
    NoDeltaRegion,
}

impl GeometricCategory {
    pub const ALL: [GeometricCategory; 7] = [
        GeometricCategory::LocalComplement,
        GeometricCategory::LocalEnhancement,
        GeometricCategory::LocalMix,
        GeometricCategory::GlobalComplement,
        GeometricCategory::GlobalEnhancement,
        GeometricCategory::GlobalMix,
        GeometricCategory::NoDeltaRegion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeometricCategory::LocalComplement => "LocalComplement",
            GeometricCategory::LocalEnhancement => "LocalEnhancement",
            GeometricCategory::LocalMix => "LocalMix",
            GeometricCategory::GlobalComplement => "GlobalComplement",
            GeometricCategory::GlobalEnhancement => "GlobalEnhancement",
            GeometricCategory::GlobalMix => "GlobalMix",
            GeometricCategory::NoDeltaRegion => "NoDeltaRegion",
        }
    }

    fn of(scope: Scope, interaction: Interaction) -> Self {
        use GeometricCategory::*;
        match (scope, interaction) {
            (Scope::Local, Interaction::Complement) => LocalComplement,
            (Scope::Local, Interaction::Enhancement) => LocalEnhancement,
            (Scope::Local, Interaction::Mix) => LocalMix,
            (Scope::Global, Interaction::Complement) => GlobalComplement,
            (Scope::Global, Interaction::Enhancement) => GlobalEnhancement,
            (Scope::Global, Interaction::Mix) => GlobalMix,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Interaction {
    Complement,
    Enhancement,
    Mix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub tau: f32,
    pub s_lo: f64,
    pub s_hi: f64,
    pub tau_loc: f64,
    pub box_dilation: f64,
    pub tau_sem: f64,
    pub top_k: usize,
    /// Upper bound on analyzed images; 0 means all.
    pub max_images: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            tau: 0.5,
            s_lo: 0.2,
            s_hi: 0.7,
            tau_loc: 0.5,
            box_dilation: 0.1,
            tau_sem: 0.2,
            top_k: 10,
            max_images: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(unit(self.s_lo) && unit(self.s_hi) && self.s_lo < self.s_hi) {
            return Err(Error::Config(format!("need 0 <= s_lo < s_hi <= 1, got {} and {}", self.s_lo, self.s_hi)));
        }
        if !(unit(self.tau_loc) && unit(self.tau_sem) && self.box_dilation >= 0.0) {
            return Err(Error::Config("tau_loc and tau_sem must lie in [0, 1], box_dilation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Local iff at least `tau_loc` of the union lies inside the dilated box.
pub fn locality(union: &[bool], width: usize, object_box: Option<&BBox>, cfg: &AnalysisConfig) -> Result<Scope> {
    let b = object_box.ok_or_else(|| Error::Annotation("no object box and no proxy".into()))?;
    let height = union.len() / width;
    let b = b.dilate(cfg.box_dilation, width, height);
    let total = count(union);
    if total == 0 {
        return Err(Error::UndefinedScore("locality of an empty region".into()));
    }
    let inside = union.iter().enumerate().filter(|(i, &m)| m && b.contains(i % width, i / width)).count();
    Ok(if inside as f64 >= cfg.tau_loc * total as f64 {
        Scope::Local
    } else {
        Scope::Global
    })
}

pub fn categorize_pair(edge: &RegionSet, delta: &RegionSet, object_box: Option<&BBox>, cfg: &AnalysisConfig) -> Result<GeometricCategory> {
    categorize_masks(&edge.union(), &delta.union(), delta.width, object_box, cfg)
}

pub fn categorize_masks(edge: &[bool], delta: &[bool], width: usize, object_box: Option<&BBox>, cfg: &AnalysisConfig) -> Result<GeometricCategory> {
    let Ok(s) = overlap_of_masks(edge, delta) else {
        return Ok(GeometricCategory::NoDeltaRegion);
    };
    let interaction = if s <= cfg.s_lo {
        Interaction::Complement
    } else if s >= cfg.s_hi {
        Interaction::Enhancement
    } else {
        Interaction::Mix
    };
    Ok(GeometricCategory::of(locality(delta, width, object_box, cfg)?, interaction))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticLabel {
    pub label: String,
    /// Share of the DELTA union covered by the segment.
    pub fraction: f64,
}

/// Source of semantic labels for a DELTA region union.
pub trait SemanticLabeler {
    fn labels(&self, delta_union: &[bool], annotation: Option<&Annotation>, cfg: &AnalysisConfig) -> Vec<SemanticLabel>;
}

/// Inherits labels from ground-truth segments.
pub struct GroundTruthLabeler;

impl SemanticLabeler for GroundTruthLabeler {
    fn labels(&self, delta_union: &[bool], annotation: Option<&Annotation>, cfg: &AnalysisConfig) -> Vec<SemanticLabel> {
        annotation.map(|a| assign_semantic_labels(delta_union, a, cfg.tau_sem)).unwrap_or_default()
    }
}

/// Segments covering more than `tau_sem` of the DELTA union, by descending
/// fraction (annotation order on ties).
pub fn assign_semantic_labels(delta_union: &[bool], annotation: &Annotation, tau_sem: f64) -> Vec<SemanticLabel> {
    let total = count(delta_union);
    if total == 0 {
        return Vec::new();
    }
    let mut out: Vec<SemanticLabel> = annotation
        .segments
        .iter()
        .filter(|s| s.mask.len() == delta_union.len())
        .map(|s| SemanticLabel {
            label: s.label.clone(),
            fraction: intersection(delta_union, &s.mask) as f64 / total as f64,
        })
        .filter(|l| l.fraction > tau_sem)
        .collect();
    out.sort_by(|a, b| b.fraction.total_cmp(&a.fraction));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_id: String,
    pub index: usize,
    pub true_label: usize,
    pub edge_prediction: usize,
    pub base_prediction: usize,
    pub category: GeometricCategory,
    pub overlap_score: Option<f64>,
    pub metrics: Option<ClassicMetrics>,
    pub labels: Vec<SemanticLabel>,
    /// Whether the object box came from annotations or the base CAM proxy.
    pub box_source: Option<String>,
    /// Run-length encoded region unions, `[start, length]` pairs.
    pub edge_regions_rle: Vec<[usize; 2]>,
    pub delta_regions_rle: Vec<[usize; 2]>,
    pub edge_region_count: usize,
    pub delta_region_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub category_counts: BTreeMap<GeometricCategory, usize>,
    pub mean_overlap: BTreeMap<GeometricCategory, Option<f64>>,
    pub top_concepts: Vec<(String, usize)>,
}

pub fn summarize(records: &[ExplanationRecord], top_k: usize) -> Result<Summary> {
    if records.is_empty() {
        return Err(domain!("nothing to summarize"));
    }
    let mut counts: BTreeMap<GeometricCategory, usize> = GeometricCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut sums: BTreeMap<GeometricCategory, (f64, usize)> = BTreeMap::new();
    let mut concepts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.category).or_default() += 1;
        if let Some(s) = r.overlap_score {
            let e = sums.entry(r.category).or_default();
            e.0 += s;
            e.1 += 1;
        }
        let mut seen: Vec<&str> = Vec::new();
        for l in &r.labels {
            if !seen.contains(&l.label.as_str()) {
                seen.push(&l.label);
                *concepts.entry(l.label.clone()).or_default() += 1;
            }
        }
    }
    let mean_overlap = GeometricCategory::ALL
        .iter()
        .map(|&c| (c, sums.get(&c).map(|(s, n)| s / *n as f64)))
        .collect();
    let mut top: Vec<(String, usize)> = concepts.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(top_k);
    Ok(Summary {
        records: records.len(),
        category_counts: counts,
        mean_overlap,
        top_concepts: top,
    })
}

/// Maps and regions behind one record, kept for overlays.
#[derive(Clone, Debug)]
pub struct ImageAnalysis {
    pub record: ExplanationRecord,
    pub edge_map: ActivationMap,
    pub delta_map: ActivationMap,
    pub edge_regions: RegionSet,
    pub delta_regions: RegionSet,
}

/// Explains every image the edge model gets wrong and the base model gets
/// right, in dataset order.
pub fn analyze_dataset(
    delta: &DeltaNetwork,
    base: &Network,
    edge: &Network,
    data: &LabeledDataset,
    cfg: &AnalysisConfig,
    labeler: &dyn SemanticLabeler,
) -> Result<Vec<ImageAnalysis>> {
    cfg.validate()?;
    let mut subset = complementary_subset(base, edge, data)?;
    if cfg.max_images > 0 {
        subset.truncate(cfg.max_images);
    }
    if subset.is_empty() {
        return Ok(Vec::new());
    }
    let sub = data.subset(&subset);
    let edge_pred = map_dataset(&sub, |x| edge.forward(x))?.argmax_rows();
    let base_pred = map_dataset(&sub, |x| base.forward(x))?.argmax_rows();
    let mut out = Vec::with_capacity(subset.len());
    for chunk in (0..sub.len()).collect::<Vec<_>>().chunks(32) {
        let (x, labels) = sub.batch(chunk);
        let edge_maps = compute_cams(edge, &x, &labels, Source::Edge)?;
        let delta_maps = compute_delta_cams(delta, base, edge, &x, &labels)?;
        let base_maps = compute_cams(base, &x, &labels, Source::Base)?;
        for (j, &i) in chunk.iter().enumerate() {
            let er = segment_regions(&edge_maps[j], cfg.tau)?;
            let dr = segment_regions(&delta_maps[j], cfg.tau)?;
            let annotation = sub.annotations[i].as_ref();
            let (object_box, box_source) = match annotation.and_then(|a| a.bbox) {
                Some(b) => (Some(b), Some("annotation".to_string())),
                None => {
                    let br = segment_regions(&base_maps[j], cfg.tau)?;
                    let proxy = br.largest().and_then(|m| BBox::of_mask(m, br.width));
                    (proxy, proxy.map(|_| "base-cam".to_string()))
                }
            };
            let (eu, du) = (er.union(), dr.union());
            let category = categorize_masks(&eu, &du, dr.width, object_box.as_ref(), cfg)?;
            let record = ExplanationRecord {
                image_id: sub.ids[i].clone(),
                index: subset[i],
                true_label: labels[j],
                edge_prediction: edge_pred[i],
                base_prediction: base_pred[i],
                category,
                overlap_score: overlap_of_masks(&eu, &du).ok(),
                metrics: set_metrics(&eu, &du).ok(),
                labels: labeler.labels(&du, annotation, cfg),
                box_source,
                edge_regions_rle: rle_encode(&eu),
                delta_regions_rle: rle_encode(&du),
                edge_region_count: er.regions.len(),
                delta_region_count: dr.regions.len(),
            };
            out.push(ImageAnalysis {
                record,
                edge_map: edge_maps[j].clone(),
                delta_map: delta_maps[j].clone(),
                edge_regions: er,
                delta_regions: dr,
            });
        }
    }
    Ok(out)
}
