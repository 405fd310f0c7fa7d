//! Browser bindings for three small pieces of the toolkit: categorizing a
//! painted edge/DELTA mask pair, evaluating the DELTA losses on feature
//! vectors, and rendering annotated synthetic images.
//!
//! Each export is a thin wrapper over a plain function returning JSON so the
//! logic can be tested natively.

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use xdelta::analysis::{categorize_masks, overlap_of_masks, segment_regions, set_metrics, locality, ActivationMap, AnalysisConfig, Source};
use xdelta::data::{generate_synthetic, synthetic_class_names, BBox, Normalization, SyntheticConfig};
use xdelta::delta::fuse;
use xdelta::tensor::Tensor;
use xdelta::training::{correlation_score, error_correlation_score, fnc_loss, mse_loss};

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

fn mask(cells: &[u8], len: usize, what: &str) -> Result<Vec<bool>, String> {
    if cells.len() != len {
        return Err(format!("{what} mask has {} cells, expected {len}", cells.len()));
    }
    Ok(cells.iter().map(|&c| c != 0).collect())
}

#[derive(Serialize)]
struct Categorized {
    category: &'static str,
    overlap: Option<f64>,
    scope: Option<String>,
    jaccard: Option<f64>,
    dice: Option<f64>,
    edge_regions: usize,
    delta_regions: usize,
}

fn count_regions(m: &[bool], width: usize) -> Result<usize, String> {
    let map = ActivationMap {
        height: m.len() / width,
        width,
        values: m.iter().map(|&v| v as u8 as f32).collect(),
        source: Source::Delta,
        class: 0,
    };
    Ok(segment_regions(&map, 0.5).map_err(|e| e.to_string())?.regions.len())
}

/// Category of a mask pair on a `width`-wide grid with object box
/// `[x0, y0, x1, y1]` (exclusive ends).
pub fn categorize_json(edge: &[u8], delta: &[u8], width: usize, height: usize, object_box: &[u32], s_lo: f64, s_hi: f64) -> Result<String, String> {
    let (e, d) = (mask(edge, width * height, "edge")?, mask(delta, width * height, "DELTA")?);
    let [x0, y0, x1, y1] = <[u32; 4]>::try_from(object_box).map_err(|_| "box needs four numbers".to_string())?;
    if !(x0 < x1 && y0 < y1 && x1 as usize <= width && y1 as usize <= height) {
        return Err("box must be non-empty and inside the grid".into());
    }
    let b = BBox {
        x0: x0 as usize,
        y0: y0 as usize,
        x1: x1 as usize,
        y1: y1 as usize,
    };
    let cfg = AnalysisConfig {
        s_lo,
        s_hi,
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let category = categorize_masks(&e, &d, width, Some(&b), &cfg).map_err(|e| e.to_string())?;
    let metrics = set_metrics(&e, &d).ok();
    let out = Categorized {
        category: category.name(),
        overlap: overlap_of_masks(&e, &d).ok(),
        scope: locality(&d, width, Some(&b), &cfg).ok().map(|s| format!("{s:?}").to_lowercase()),
        jaccard: metrics.map(|m| m.jaccard),
        dice: metrics.map(|m| m.dice),
        edge_regions: count_regions(&e, width)?,
        delta_regions: count_regions(&d, width)?,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn categorize(edge: &[u8], delta: &[u8], width: usize, height: usize, object_box: &[u32], s_lo: f64, s_hi: f64) -> Result<String, JsValue> {
    js(categorize_json(edge, delta, width, height, object_box, s_lo, s_hi))
}

/// MSE, FNC and correlation scores for `n` examples of dimension `dim`,
/// fusing `F_E` and `F_delta` by their mean.
pub fn losses_json(f_e: &[f32], f_d: &[f32], f_b: &[f32], dim: usize, lambda: f64) -> Result<String, String> {
    if dim == 0 || f_e.len() % dim != 0 {
        return Err("feature length must be a multiple of the dimension".into());
    }
    let shape = [f_e.len() / dim, dim];
    let t = |v: &[f32]| Tensor::from_vec(&shape, v.to_vec()).map_err(|e| e.to_string());
    let (e, d, b) = (t(f_e)?, t(f_d)?, t(f_b)?);
    let f = fuse(&e, &d).map_err(|e| e.to_string())?;
    let mse = mse_loss(&f, &b).map_err(|e| e.to_string())?;
    let fnc = fnc_loss(&e, &d, &f, &b, lambda).map_err(|e| e.to_string())?;
    Ok(json!({
        "fused": f.data(),
        "mse": mse,
        "fnc": fnc,
        "correlation": correlation_score(&e, &d, &f).ok(),
        "error_correlation": error_correlation_score(&e, &d, &b).ok(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn losses(f_e: &[f32], f_d: &[f32], f_b: &[f32], dim: usize, lambda: f64) -> Result<String, JsValue> {
    js(losses_json(f_e, f_d, f_b, dim, lambda))
}

/// One synthetic image of `class` as RGBA bytes plus its part masks.
pub fn synthetic_json(seed: u64, class: usize, distractors: usize) -> Result<String, String> {
    let names = synthetic_class_names();
    if class >= names.len() {
        return Err(format!("class {class} outside 0..{}", names.len()));
    }
    let cfg = SyntheticConfig {
        train: names.len(),
        test: 0,
        seed,
        distractors,
        ..Default::default()
    };
    let raw = Normalization {
        mean: vec![0.0; 3],
        std: vec![1.0; 3],
    };
    let (ds, _) = generate_synthetic(&cfg, &raw).map_err(|e| e.to_string())?;
    let i = ds.labels.iter().position(|&l| l == class).ok_or("class missing from sample")?;
    let (h, w) = (ds.height, ds.width);
    let img = ds.image(i);
    let mut rgba = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        for c in 0..3 {
            rgba.push((img[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    let ann = ds.annotations[i].as_ref().ok_or("image has no annotation")?;
    let parts: serde_json::Map<String, serde_json::Value> = ann
        .segments
        .iter()
        .map(|s| (s.label.clone(), json!(s.mask.iter().map(|&m| m as u8).collect::<Vec<_>>())))
        .collect();
    Ok(json!({
        "class": names[class],
        "width": w,
        "height": h,
        "rgba": rgba,
        "parts": parts,
        "bbox": ann.bbox.map(|b| [b.x0, b.y0, b.x1, b.y1]),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn synthetic(seed: u64, class: usize, distractors: usize) -> Result<String, JsValue> {
    js(synthetic_json(seed, class, distractors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn grid(rects: &[[usize; 4]]) -> Vec<u8> {
        let mut m = vec![0u8; 100];
        for &[x0, y0, x1, y1] in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    m[y * 10 + x] = 1;
                }
            }
        }
        m
    }

    #[test]
    fn painted_pair_is_categorized() {
        let out: Value = serde_json::from_str(
            &categorize_json(&grid(&[[2, 2, 4, 4]]), &grid(&[[2, 2, 6, 4]]), 10, 10, &[1, 1, 8, 8], 0.2, 0.7).unwrap(),
        )
        .unwrap();
        assert_eq!(out["category"], "LocalMix");
        assert_eq!(out["overlap"], 0.5);
        assert_eq!(out["delta_regions"], 1);
        let none: Value = serde_json::from_str(&categorize_json(&grid(&[]), &grid(&[]), 10, 10, &[1, 1, 8, 8], 0.2, 0.7).unwrap()).unwrap();
        assert_eq!(none["category"], "NoDeltaRegion");
        assert!(categorize_json(&grid(&[]), &[0; 3], 10, 10, &[1, 1, 8, 8], 0.2, 0.7).is_err());
        assert!(categorize_json(&grid(&[]), &grid(&[]), 10, 10, &[5, 5, 5, 8], 0.2, 0.7).is_err());
    }

    #[test]
    fn losses_match_the_hand_example() {
        let out: Value = serde_json::from_str(&losses_json(&[1.0], &[-1.0], &[0.0], 1, 0.5).unwrap()).unwrap();
        assert_eq!(out["fnc"], 0.0);
        assert_eq!(out["mse"], 0.0);
        let out: Value = serde_json::from_str(&losses_json(&[1.0, 2.0], &[3.0, 0.0], &[0.0, 0.0], 2, 0.5).unwrap()).unwrap();
        assert!((out["correlation"].as_f64().unwrap() + 1.0).abs() < 1e-12);
        assert!(losses_json(&[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 3], 2, 0.5).is_err());
    }

    #[test]
    fn synthetic_sample_has_parts() {
        let out: Value = serde_json::from_str(&synthetic_json(3, 4, 1).unwrap()).unwrap();
        assert_eq!(out["class"], "triangle-warm");
        assert_eq!(out["rgba"].as_array().unwrap().len(), 32 * 32 * 4);
        assert!(out["parts"]["eye"].as_array().unwrap().iter().any(|v| v == 1));
        assert!(synthetic_json(3, 10, 1).is_err());
    }
}
