//! Labeled image datasets: in-memory storage, a procedural CIFAR-style
//! generator with part annotations, and the on-disk folder layout.
//!
//! On disk a dataset is a directory with one sub-folder per class holding
//! PNG images, plus an optional `annotations.jsonl` sidecar with one record
//! per image: `{"id", "segments": [{"label", "rle" | "polygon"}], "bbox"}`.
//! RLE is a list of `[start, length]` runs over the row-major pixel index.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, structural, Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned pixel box, `x0..x1` by `y0..y1` (exclusive ends).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn of_mask(mask: &[bool], width: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            b = Some(match b {
                None => BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
        b
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Grows each side by `fraction` of the box extent, clipped to the image.
    pub fn dilate(&self, fraction: f64, width: usize, height: usize) -> BBox {
        let dx = ((self.x1 - self.x0) as f64 * fraction).round() as usize;
        let dy = ((self.y1 - self.y0) as f64 * fraction).round() as usize;
        BBox {
            x0: self.x0.saturating_sub(dx),
            y0: self.y0.saturating_sub(dy),
            x1: (self.x1 + dx).min(width),
            y1: (self.y1 + dy).min(height),
        }
    }
}

/// One labeled image segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub label: String,
    /// Row-major `H x W` membership.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotation {
    pub segments: Vec<Segment>,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub ids: Vec<String>,
    /// `N x C x H x W`, normalized.
    images: Vec<f32>,
    pub labels: Vec<usize>,
    pub annotations: Vec<Option<Annotation>>,
}

/// Per-channel normalization `(v - mean) / std` applied to `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        }
    }
}

impl LabeledDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        shape: [usize; 3],
        class_names: Vec<String>,
        ids: Vec<String>,
        images: Vec<f32>,
        labels: Vec<usize>,
        annotations: Vec<Option<Annotation>>,
    ) -> Result<Self> {
        let [channels, height, width] = shape;
        let ds = LabeledDataset {
            channels,
            height,
            width,
            class_names,
            ids,
            images,
            labels,
            annotations,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.images.len() != n * self.image_len() || self.ids.len() != n || self.annotations.len() != n {
            return Err(structural!("dataset arrays disagree on length {}", n));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(domain!("label {} outside {} classes", bad, self.class_names.len()));
        }
        let pixels = self.height * self.width;
        for ann in self.annotations.iter().flatten() {
            if ann.segments.iter().any(|s| s.mask.len() != pixels) {
                return Err(structural!("segment mask does not match {}x{} image", self.height, self.width));
            }
            if let Some(b) = ann.bbox {
                if b.x1 > self.width || b.y1 > self.height || b.x0 >= b.x1 || b.y0 >= b.y1 {
                    return Err(structural!("bounding box {:?} outside image", b));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Images and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let l = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (x, labels) = self.batch(indices);
        LabeledDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            class_names: self.class_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: x.into_data(),
            labels,
            annotations: indices.iter().map(|&i| self.annotations[i].clone()).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

// ---------------------------------------------------------------------------
// procedural generator

/// Body shapes of the generated objects; each combines with a warm or cool
/// eye colour to give ten classes.
const SHAPES: [&str; 5] = ["disk", "square", "triangle", "diamond", "cross"];
const EYES: [&str; 2] = ["warm", "cool"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Std of per-pixel Gaussian noise in `[0, 1]` units.
    pub noise: f32,
    /// Eye-like spots scattered outside the object.
    pub distractors: usize,
    /// Side length of the square eye and distractor spots.
    pub eye_size: usize,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 5000,
            test: 1000,
            seed: 7,
            noise: 0.06,
            distractors: 1,
            eye_size: 4,
            image_size: 32,
        }
    }
}

pub fn synthetic_class_names() -> Vec<String> {
    SHAPES
        .iter()
        .flat_map(|s| EYES.iter().map(move |e| format!("{s}-{e}")))
        .collect()
}

fn inside_shape(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy >= -r && dy <= 0.7 * r && dx.abs() <= 0.95 * r * (dy + r) / (1.7 * r),
        3 => dx.abs() + dy.abs() <= 1.1 * r,
        _ => (dx.abs() <= 0.38 * r && dy.abs() <= r) || (dy.abs() <= 0.38 * r && dx.abs() <= r),
    }
}

fn eye_colour(rng: &mut ChaCha8Rng, warm: bool) -> [f32; 3] {
    let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.08f32..0.08);
    if warm {
        [0.95 + j(rng) * 0.5, 0.3 + j(rng), 0.05 + j(rng).abs()]
    } else {
        [0.05 + j(rng).abs(), 0.35 + j(rng), 0.95 + j(rng) * 0.5]
    }
}

/// Renders one image in `[0, 1]` RGB (`C x H x W`) with its annotation.
fn render(rng: &mut ChaCha8Rng, class: usize, cfg: &SyntheticConfig) -> (Vec<f32>, Annotation) {
    let s = cfg.image_size;
    let px = s * s;
    let shape = class / EYES.len();
    let warm = class % EYES.len() == 0;
    let mut img = vec![0.0f32; 3 * px];

    // smooth two-tone background
    let bg0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.6));
    let bg1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.6));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..s {
        for x in 0..s {
            let t = (((x as f32 - s as f32 / 2.0) * ca + (y as f32 - s as f32 / 2.0) * sa) / s as f32 + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * px + y * s + x] = bg0[c] * (1.0 - t) + bg1[c] * t;
            }
        }
    }

    let r: f32 = rng.random_range(0.18..0.27) * s as f32;
    let margin = r + 2.0;
    let cx: f32 = rng.random_range(margin..s as f32 - margin);
    let cy: f32 = rng.random_range(margin..s as f32 - margin);
    let body_colour: [f32; 3] = loop {
        let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let lum = (c[0] + c[1] + c[2]) / 3.0;
        let bg = (bg0.iter().sum::<f32>() + bg1.iter().sum::<f32>()) / 6.0;
        if (lum - bg).abs() > 0.15 {
            break c;
        }
    };

    let mut body = vec![false; px];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            body[y * s + x] = inside_shape(shape, dx, dy, r);
        }
    }

    // optional tail: a short thin line leaving the body
    let mut tail = vec![false; px];
    if rng.random_bool(0.5) {
        let dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let len: f32 = rng.random_range(4.0..7.0);
        let mut t = 0.0;
        while t < r * 1.2 + len {
            let x = (cx + dir.cos() * t).floor();
            let y = (cy + dir.sin() * t).floor();
            if x >= 0.0 && y >= 0.0 && (x as usize) < s && (y as usize) < s {
                let i = y as usize * s + x as usize;
                if !body[i] {
                    tail[i] = true;
                }
            }
            t += 0.5;
        }
    }

    // square eye fully inside the body
    let e = cfg.eye_size.max(1);
    let cells = |x: usize, y: usize| (0..e).flat_map(move |dy| (0..e).map(move |dx| (x + dx, y + dy)));
    let candidates: Vec<(usize, usize)> = (0..=s - e)
        .flat_map(|y| (0..=s - e).map(move |x| (x, y)))
        .filter(|&(x, y)| cells(x, y).all(|(a, b)| body[b * s + a]))
        .collect();
    let mut eye = vec![false; px];
    if let Some(&(ex, ey)) = candidates.get(rng.random_range(0..candidates.len().max(1))) {
        for (a, b) in cells(ex, ey) {
            eye[b * s + a] = true;
        }
    }
    let eye_rgb = eye_colour(rng, warm);

    for i in 0..px {
        let colour = if eye[i] {
            Some(eye_rgb)
        } else if body[i] || tail[i] {
            Some(body_colour)
        } else {
            None
        };
        if let Some(col) = colour {
            for c in 0..3 {
                img[c * px + i] = col[c];
            }
        }
    }

    // eye-like distractors away from the object
    let object: Vec<bool> = (0..px).map(|i| body[i] || tail[i]).collect();
    for _ in 0..cfg.distractors {
        for _attempt in 0..20 {
            let x = rng.random_range(0..=s - e);
            let y = rng.random_range(0..=s - e);
            let spot: Vec<(usize, usize)> = cells(x, y).collect();
            if spot.iter().any(|&(a, b)| object[b * s + a]) {
                continue;
            }
            let warm_spot = rng.random_bool(0.5);
            let col = eye_colour(rng, warm_spot);
            for &(a, b) in &spot {
                for c in 0..3 {
                    img[c * px + b * s + a] = col[c];
                }
            }
            break;
        }
    }

    let normal = Normal::new(0.0f32, cfg.noise.max(1e-6)).expect("noise std");
    for v in &mut img {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }

    let body_only: Vec<bool> = (0..px).map(|i| body[i] && !eye[i]).collect();
    let mut segments = vec![
        Segment { label: "body".into(), mask: body_only },
        Segment { label: "eye".into(), mask: eye },
    ];
    if tail.iter().any(|&t| t) {
        segments.push(Segment { label: "tail".into(), mask: tail });
    }
    (
        img,
        Annotation {
            segments,
            bbox: BBox::of_mask(&object, s),
        },
    )
}

fn normalize_in_place(img: &mut [f32], channels: usize, norm: &Normalization) {
    let px = img.len() / channels;
    for c in 0..channels {
        for v in &mut img[c * px..(c + 1) * px] {
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
}

fn generate_split(cfg: &SyntheticConfig, n: usize, seed: u64, tag: &str, norm: &Normalization) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = SHAPES.len() * EYES.len();
    let mut images = Vec::with_capacity(n * 3 * cfg.image_size * cfg.image_size);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (mut img, ann) = render(&mut rng, class, cfg);
        normalize_in_place(&mut img, 3, norm);
        images.extend(img);
        labels.push(class);
        ids.push(format!("{tag}-{i:05}"));
        annotations.push(Some(ann));
    }
    LabeledDataset::new(
        [3, cfg.image_size, cfg.image_size],
        synthetic_class_names(),
        ids,
        images,
        labels,
        annotations,
    )
}

/// Balanced train and test splits; deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig, norm: &Normalization) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.image_size < 16 {
        return Err(domain!("image size {} too small", cfg.image_size));
    }
    let train = generate_split(cfg, cfg.train, cfg.seed, "train", norm)?;
    let test = generate_split(cfg, cfg.test, cfg.seed.wrapping_add(0x9e37_79b9), "test", norm)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// folder layout

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rle: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    polygon: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    segments: Vec<SegmentRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bbox: Option<[usize; 4]>,
}

pub fn rle_encode(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]], len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for &[start, n] in runs {
        if start + n > len {
            return Err(Error::Annotation(format!("run {start}+{n} exceeds {len} pixels")));
        }
        mask[start..start + n].fill(true);
    }
    Ok(mask)
}

/// Pixels whose centres fall inside the polygon (even-odd rule).
pub fn rasterize_polygon(points: &[[f64; 2]], width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    if points.len() < 3 {
        return mask;
    }
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            let mut j = points.len() - 1;
            for i in 0..points.len() {
                let ([xi, yi], [xj, yj]) = (points[i], points[j]);
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            mask[y * width + x] = inside;
        }
    }
    mask
}

/// Writes the dataset as class folders of PNGs plus the annotation sidecar.
pub fn export_folder(ds: &LabeledDataset, dir: &Path, norm: &Normalization) -> Result<()> {
    if ds.channels != 3 {
        return Err(structural!("PNG export needs 3 channels, got {}", ds.channels));
    }
    fs::create_dir_all(dir)?;
    for name in &ds.class_names {
        fs::create_dir_all(dir.join(name))?;
    }
    let px = ds.height * ds.width;
    let mut sidecar = fs::File::create(dir.join("annotations.jsonl"))?;
    for i in 0..ds.len() {
        let img = ds.image(i);
        let mut buf = image::RgbImage::new(ds.width as u32, ds.height as u32);
        for (p, pixel) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                let v = img[c * px + p] * norm.std[c] + norm.mean[c];
                pixel.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(dir.join(&ds.class_names[ds.labels[i]]).join(format!("{}.png", ds.ids[i])))?;
        if let Some(ann) = &ds.annotations[i] {
            let rec = AnnotationRecord {
                id: ds.ids[i].clone(),
                segments: ann
                    .segments
                    .iter()
                    .map(|s| SegmentRecord {
                        label: s.label.clone(),
                        rle: Some(rle_encode(&s.mask)),
                        polygon: None,
                    })
                    .collect(),
                bbox: ann.bbox.map(|b| [b.x0, b.y0, b.x1, b.y1]),
            };
            writeln!(sidecar, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

/// Reads a class-folder dataset; classes are the sorted sub-folder names.
pub fn load_folder(dir: &Path, norm: &Normalization) -> Result<LabeledDataset> {
    let mut class_names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Config(format!("{} has no class folders", dir.display())));
    }

    let mut sidecar: BTreeMap<String, AnnotationRecord> = BTreeMap::new();
    let ann_path = dir.join("annotations.jsonl");
    if ann_path.exists() {
        for line in BufReader::new(fs::File::open(&ann_path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(&line)?;
            sidecar.insert(rec.id.clone(), rec);
        }
    }

    let mut shape: Option<(usize, usize)> = None;
    let (mut images, mut labels, mut ids, mut annotations) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, name) in class_names.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir.join(name))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for path in files {
            let img = image::open(&path)?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match shape {
                None => shape = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(structural!("{} is {}x{}, expected {}x{}", path.display(), h, w, s.0, s.1))
                }
                _ => {}
            }
            let px = h * w;
            let mut chw = vec![0.0f32; 3 * px];
            for (p, pixel) in img.pixels().enumerate() {
                for c in 0..3 {
                    chw[c * px + p] = pixel.0[c] as f32 / 255.0;
                }
            }
            normalize_in_place(&mut chw, 3, norm);
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let ann = match sidecar.get(&id) {
                Some(rec) => {
                    let mut segments = Vec::new();
                    for s in &rec.segments {
                        let mask = match (&s.rle, &s.polygon) {
                            (Some(r), _) => rle_decode(r, px)?,
                            (None, Some(p)) => rasterize_polygon(p, w, h),
                            (None, None) => {
                                return Err(Error::Annotation(format!("segment '{}' of {} has no geometry", s.label, id)))
                            }
                        };
                        segments.push(Segment { label: s.label.clone(), mask });
                    }
                    Some(Annotation {
                        segments,
                        bbox: rec.bbox.map(|[x0, y0, x1, y1]| BBox { x0, y0, x1, y1 }),
                    })
                }
                None => None,
            };
            images.extend(chw);
            labels.push(label);
            ids.push(id);
            annotations.push(ann);
        }
    }
    let (h, w) = shape.ok_or_else(|| Error::Config(format!("{} contains no images", dir.display())))?;
    LabeledDataset::new([3, h, w], class_names, ids, images, labels, annotations)
}
