//! Report documents, summary plots and bundle validation.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{ExplanationRecord, GeometricCategory, Summary};
use crate::error::{domain, structural, Error, Result};
use crate::nn::cost::CostProfile;
use crate::nn::train::{EpochStats, PairVerdict};
use crate::sparsity::{CoefficientEpoch, LayerExtraction};
use crate::training::{EpochRecord, TrainingRun};

pub const SCHEMA: &str = "xdelta-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioReport {
    pub schema: String,
    pub param_delta: u64,
    pub param_edge: u64,
    pub param_base: u64,
    pub macs_delta: u64,
    pub macs_edge: u64,
    pub macs_base: u64,
    pub p_delta_edge: f64,
    pub f_delta_edge: f64,
    pub p_delta_base: f64,
    pub f_delta_base: f64,
    pub p_edge_base: f64,
    pub f_edge_base: f64,
    pub budget_satisfied: bool,
    pub fused_accuracy: f64,
    pub edge_accuracy: f64,
    pub base_accuracy: f64,
    pub accuracy_gain_over_edge: f64,
}

fn ratio(a: u64, b: u64, what: &str) -> Result<f64> {
    if b == 0 {
        return Err(structural!("{what} has a zero denominator"));
    }
    Ok(a as f64 / b as f64)
}

/// Cost ratios of DELTA against each endpoint plus the accuracy summary.
pub fn compute_ratios(delta: &CostProfile, edge: &CostProfile, base: &CostProfile, fused: f64, edge_acc: f64, base_acc: f64) -> Result<RatioReport> {
    Ok(RatioReport {
        schema: SCHEMA.into(),
        param_delta: delta.param_count,
        param_edge: edge.param_count,
        param_base: base.param_count,
        macs_delta: delta.mac_count,
        macs_edge: edge.mac_count,
        macs_base: base.mac_count,
        p_delta_edge: ratio(delta.param_count, edge.param_count, "P_D/E")?,
        f_delta_edge: ratio(delta.mac_count, edge.mac_count, "F_D/E")?,
        p_delta_base: ratio(delta.param_count, base.param_count, "P_D/B")?,
        f_delta_base: ratio(delta.mac_count, base.mac_count, "F_D/B")?,
        p_edge_base: ratio(edge.param_count, base.param_count, "P_E/B")?,
        f_edge_base: ratio(edge.mac_count, base.mac_count, "F_E/B")?,
        budget_satisfied: crate::delta::within_budget(delta, edge, base),
        fused_accuracy: fused,
        edge_accuracy: edge_acc,
        base_accuracy: base_acc,
        accuracy_gain_over_edge: fused - edge_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationReport {
    pub schema: String,
    pub verdict: PairVerdict,
    pub min_gap: f64,
    pub base_checksum: String,
    pub edge_checksum: String,
    pub base_history: Vec<EpochStats>,
    pub edge_history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub layer: usize,
    pub sparsity: f64,
    /// One character per unit, `1` kept and `0` zeroed.
    pub keep: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionReport {
    pub schema: String,
    pub base_checksum: String,
    pub layers: Vec<LayerExtraction>,
    pub masks: Vec<MaskRecord>,
    pub coefficient_trace: Vec<CoefficientEpoch>,
    pub finetune_trace: Vec<EpochStats>,
    pub masked_weight_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyReport {
    pub schema: String,
    pub base_checksum: String,
    pub edge_checksum: String,
    pub truncate_at: usize,
    pub d_f: usize,
    pub components: BTreeMap<String, CostProfile>,
    pub delta_cost: CostProfile,
    pub edge_cost: CostProfile,
    pub base_cost: CostProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationReport {
    /// Images the edge model gets wrong and the base gets right.
    pub subset_size: usize,
    pub correlation_score: Option<f64>,
    pub error_correlation_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingReport {
    pub schema: String,
    pub run: TrainingRun,
    pub correlation: CorrelationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricSummary {
    pub schema: String,
    pub records: usize,
    pub category_counts: BTreeMap<GeometricCategory, usize>,
    pub mean_overlap: BTreeMap<GeometricCategory, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticSummary {
    pub schema: String,
    pub records: usize,
    pub labeled_records: usize,
    pub top_concepts: Vec<(String, usize)>,
}

pub fn split_summary(s: &Summary, records: &[ExplanationRecord]) -> (GeometricSummary, SemanticSummary) {
    (
        GeometricSummary {
            schema: SCHEMA.into(),
            records: s.records,
            category_counts: s.category_counts.clone(),
            mean_overlap: s.mean_overlap.clone(),
        },
        SemanticSummary {
            schema: SCHEMA.into(),
            records: s.records,
            labeled_records: records.iter().filter(|r| !r.labels.is_empty()).count(),
            top_concepts: s.top_concepts.clone(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    /// Bundle-relative path to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

/// `category,count,mean_overlap` rows in enumeration order.
pub fn category_table(g: &GeometricSummary) -> String {
    let mut out = String::from("category,count,mean_overlap\n");
    for c in GeometricCategory::ALL {
        let n = g.category_counts.get(&c).copied().unwrap_or(0);
        let m = g.mean_overlap.get(&c).copied().flatten().map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", c.name(), n, m));
    }
    out
}

pub fn concept_table(s: &SemanticSummary) -> String {
    let mut out = String::from("concept,count\n");
    for (c, n) in &s.top_concepts {
        out.push_str(&format!("{},{}\n", c.replace(',', " "), n));
    }
    out
}

fn plot_error<E: std::fmt::Debug>(e: E) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e:?}")))
}

/// Vertical bar chart written as SVG.
pub fn bar_chart(path: &Path, title: &str, labels: &[String], values: &[usize]) -> Result<()> {
    if labels.is_empty() || labels.len() != values.len() {
        return Err(domain!("bar chart needs one value per label"));
    }
    let top = values.iter().copied().max().unwrap_or(0).max(1) as u32;
    let width = (120 + 90 * labels.len()) as u32;
    let root = SVGBackend::new(path, (width.max(480), 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(70)
        .y_label_area_size(40)
        .build_cartesian_2d((0..labels.len()).into_segmented(), 0u32..top + top / 10 + 1)
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(labels.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .x_label_style(("sans-serif", 11))
        .draw()
        .map_err(plot_error)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0), (SegmentValue::Exact(i + 1), v as u32)],
                RGBColor(0, 150, 170).filled(),
            );
            bar.set_margin(0, 0, 8, 8);
            bar
        }))
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}

/// Category and missed-concept charts, each with its CSV table. Returns
/// the written paths relative to `dir`.
pub fn emit_summary_plots(dir: &Path, g: &GeometricSummary, s: &SemanticSummary) -> Result<Vec<String>> {
    if g.records == 0 {
        return Err(domain!("cannot plot an empty summary"));
    }
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::create_dir_all(dir.join("tables"))?;
    let mut written = Vec::new();
    let present: Vec<GeometricCategory> = GeometricCategory::ALL
        .into_iter()
        .filter(|c| g.category_counts.get(c).copied().unwrap_or(0) > 0)
        .collect();
    let labels: Vec<String> = present.iter().map(|c| c.name().to_string()).collect();
    let values: Vec<usize> = present.iter().map(|c| g.category_counts[c]).collect();
    bar_chart(&dir.join("plots/geometric_categories.svg"), "Geometric categories", &labels, &values)?;
    std::fs::write(dir.join("tables/geometric_categories.csv"), category_table(g))?;
    written.push("plots/geometric_categories.svg".to_string());
    written.push("tables/geometric_categories.csv".to_string());
    std::fs::write(dir.join("tables/missed_concepts.csv"), concept_table(s))?;
    written.push("tables/missed_concepts.csv".to_string());
    if !s.top_concepts.is_empty() {
        let labels: Vec<String> = s.top_concepts.iter().map(|c| c.0.clone()).collect();
        let values: Vec<usize> = s.top_concepts.iter().map(|c| c.1).collect();
        bar_chart(&dir.join("plots/missed_concepts.svg"), "Most frequently missed concepts", &labels, &values)?;
        written.push("plots/missed_concepts.svg".to_string());
    }
    Ok(written)
}

fn check_schema(file: &str, schema: &str) -> Result<()> {
    if schema != SCHEMA {
        return Err(structural!("{file} has schema {schema:?}, expected {SCHEMA:?}"));
    }
    Ok(())
}

fn parse<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T> {
    let bytes = std::fs::read(dir.join(file))?;
    serde_json::from_slice(&bytes).map_err(|e| structural!("{file}: {e}"))
}

/// Checks every document of a report bundle against its schema, the
/// manifest hashes, and the cross-document invariants.
pub fn validate_bundle(dir: &Path) -> Result<()> {
    let manifest: Manifest = parse(dir, "manifest.json")?;
    check_schema("manifest.json", &manifest.schema)?;
    for (file, hash) in &manifest.files {
        let bytes = std::fs::read(dir.join(file))?;
        if &super::artifacts::sha256_hex(&bytes) != hash {
            return Err(Error::Consistency(format!("{file} does not match the manifest")));
        }
    }
    let v: ValidationReport = parse(dir, "validation.json")?;
    check_schema("validation.json", &v.schema)?;
    if !manifest.files.contains_key("ratio_report.json") {
        return Ok(());
    }
    let x: ExtractionReport = parse(dir, "extraction.json")?;
    check_schema("extraction.json", &x.schema)?;
    let a: AssemblyReport = parse(dir, "assembly.json")?;
    check_schema("assembly.json", &a.schema)?;
    let t: TrainingReport = parse(dir, "training.json")?;
    check_schema("training.json", &t.schema)?;
    let trace = std::fs::read_to_string(dir.join("training_trace.jsonl"))?;
    let rows: Vec<EpochRecord> = trace
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| structural!("training_trace.jsonl: {e}")))
        .collect::<Result<_>>()?;
    for r in &rows {
        let w = &t.run.weights;
        let total = r.l_mse + w.lambda_fnc * r.l_fnc + w.lambda_sr * r.l_sr;
        if (total - r.total).abs() > 1e-6 * (1.0 + r.total.abs()) {
            return Err(Error::Consistency(format!("epoch {} total loss does not recombine", r.epoch)));
        }
    }
    let r: RatioReport = parse(dir, "ratio_report.json")?;
    check_schema("ratio_report.json", &r.schema)?;
    let recount = [
        (r.p_delta_edge, r.param_delta, r.param_edge),
        (r.f_delta_edge, r.macs_delta, r.macs_edge),
        (r.p_delta_base, r.param_delta, r.param_base),
        (r.f_delta_base, r.macs_delta, r.macs_base),
    ];
    for (value, num, den) in recount {
        if (value - num as f64 / den as f64).abs() > 1e-9 {
            return Err(Error::Consistency("ratio does not match its counts".into()));
        }
    }
    let records = std::fs::read_to_string(dir.join("explanations.jsonl"))?;
    let records: Vec<ExplanationRecord> = records
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| structural!("explanations.jsonl: {e}")))
        .collect::<Result<_>>()?;
    let g: GeometricSummary = parse(dir, "geometric_summary.json")?;
    check_schema("geometric_summary.json", &g.schema)?;
    let s: SemanticSummary = parse(dir, "semantic_summary.json")?;
    check_schema("semantic_summary.json", &s.schema)?;
    if g.records != records.len() || g.category_counts.values().sum::<usize>() != records.len() {
        return Err(Error::Consistency("category counts do not sum to the record count".into()));
    }
    Ok(())
}
