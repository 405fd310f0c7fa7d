//! Staged orchestration: validate, extract, assemble, train, analyze, report.
//!
//! Every stage result is stored under `out_dir/artifacts` with a name
//! derived from the hash of everything that determines it, so re-running a
//! config resumes from the last completed stage. The final bundle lands in
//! `out_dir/report`.

pub mod artifacts;
pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::Serialize;

use crate::analysis::{analyze_dataset, summarize, ExplanationRecord, GroundTruthLabeler, ImageAnalysis};
use crate::data::{generate_synthetic, load_folder, LabeledDataset, Normalization};
use crate::delta::{assemble_within_budget, DeltaNetwork};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_network, param_checksum, Checkpoint};
use crate::nn::cost::network_cost;
use crate::nn::network::Network;
use crate::nn::train::{train_classifier, validate_pair, EpochStats, MIN_ACCURACY_GAP};
use crate::sparsity::{build_extended_network, extract_subgraph, fine_tune_subgraph, train_sparsity_coefficients, BinaryMask, SubgraphSpec};
use crate::training::{complementary_subset, correlation_score, dataset_features, error_correlation_score, train_delta};

use artifacts::{cache_key, json_lines, pretty_json, sha256_hex, ArtifactStore};
pub use config::{DataSource, PipelineConfig, Stage};
use report::*;

/// Prefixes a stage name onto an error while keeping its kind.
fn tagged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Structural(m) => Error::Structural(format!("[{stage}] {m}")),
        Error::Domain(m) => Error::Domain(format!("[{stage}] {m}")),
        Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("[{stage}] {m}")),
        Error::Training(m) => Error::Training(format!("[{stage}] {m}")),
        Error::Consistency(m) => Error::Consistency(format!("[{stage}] {m}")),
        Error::Budget(m) => Error::Budget(format!("[{stage}] {m}")),
        Error::Annotation(m) => Error::Annotation(format!("[{stage}] {m}")),
        Error::UndefinedScore(m) => Error::UndefinedScore(format!("[{stage}] {m}")),
        Error::IncompatiblePair(m) => Error::IncompatiblePair(format!("[{stage}] {m}")),
        other => other,
    })
}

struct Model {
    net: Network,
    key: String,
    history: Vec<EpochStats>,
}

/// Everything a full run produces, kept in memory for callers.
pub struct RunOutput {
    pub bundle_dir: PathBuf,
    pub validation: ValidationReport,
    pub extraction: Option<ExtractionReport>,
    pub assembly: Option<AssemblyReport>,
    pub training: Option<TrainingReport>,
    pub records: Option<Vec<ExplanationRecord>>,
    pub geometric: Option<GeometricSummary>,
    pub semantic: Option<SemanticSummary>,
    pub ratios: Option<RatioReport>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    store: ArtifactStore,
    train: LabeledDataset,
    test: LabeledDataset,
    data_key: String,
}

fn masks_to_records(masks: &[(usize, BinaryMask)]) -> Vec<MaskRecord> {
    masks
        .iter()
        .map(|(l, m)| MaskRecord {
            layer: *l,
            sparsity: m.sparsity,
            keep: m.keep.iter().map(|&k| if k { '1' } else { '0' }).collect(),
        })
        .collect()
}

fn masks_from_records(net: &Network, records: &[MaskRecord]) -> Result<Vec<(usize, BinaryMask)>> {
    records
        .iter()
        .map(|r| {
            let shape = match net.layers().get(r.layer) {
                Some(l) => l.params().first().map(|p| p.2.clone()).unwrap_or_default(),
                None => return Err(Error::Consistency(format!("mask for missing layer {}", r.layer))),
            };
            Ok((
                r.layer,
                BinaryMask {
                    shape,
                    sparsity: r.sparsity,
                    keep: r.keep.chars().map(|c| c == '1').collect(),
                },
            ))
        })
        .collect()
}

fn delta_checkpoint(d: &DeltaNetwork, base: &Network, edge: &Network) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("base_checksum".to_string(), param_checksum(base));
    meta.insert("edge_checksum".to_string(), param_checksum(edge));
    Checkpoint {
        networks: d.components().iter().map(|n| (*n).clone()).collect(),
        meta,
    }
}

/// Rebuilds a DELTA network, refusing one built against other endpoints.
pub fn delta_from_checkpoint(ck: Checkpoint, base: &Network, edge: &Network) -> Result<DeltaNetwork> {
    for (k, net) in [("base_checksum", base), ("edge_checksum", edge)] {
        if ck.meta.get(k).map(String::as_str) != Some(param_checksum(net).as_str()) {
            return Err(Error::Consistency(format!("DELTA checkpoint {k} does not match the loaded model")));
        }
    }
    let [branch, refiner, adapter, resizer]: [Network; 4] = ck
        .networks
        .try_into()
        .map_err(|_| Error::Consistency("DELTA checkpoint must hold four networks".into()))?;
    Ok(DeltaNetwork {
        branch,
        refiner,
        adapter,
        resizer,
    })
}

fn write_overlay(path: &Path, data: &LabeledDataset, index: usize, a: &ImageAnalysis, norm: &Normalization) -> Result<()> {
    const SCALE: u32 = 4;
    let (h, w) = (data.height, data.width);
    let img = data.image(index);
    let (eu, du) = (a.edge_regions.union(), a.delta_regions.union());
    let mut buf = image::RgbImage::new(w as u32 * SCALE, h as u32 * SCALE);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut rgb = [0f32; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = (img[c * h * w + p] * norm.std[c] + norm.mean[c]).clamp(0.0, 1.0);
            }
            // cyan marks DELTA regions, magenta edge regions
            let tint = match (du[p], eu[p]) {
                (true, true) => Some([0.5, 0.6, 1.0]),
                (true, false) => Some([0.0, 1.0, 1.0]),
                (false, true) => Some([1.0, 0.0, 1.0]),
                _ => None,
            };
            if let Some(t) = tint {
                for c in 0..3 {
                    rgb[c] = 0.5 * rgb[c] + 0.5 * t[c];
                }
            }
            let px = image::Rgb(rgb.map(|v| (v * 255.0).round() as u8));
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    buf.put_pixel(x as u32 * SCALE + dx, y as u32 * SCALE + dy, px);
                }
            }
        }
    }
    buf.save(path)?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.seeded();
        let store = ArtifactStore::open(&cfg.out_dir.join("artifacts"))?;
        let (train, test) = match cfg.data.source {
            DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic, &cfg.data.normalization)?,
            DataSource::Folder => (
                load_folder(cfg.data.train_dir.as_deref().expect("validated"), &cfg.data.normalization)?,
                load_folder(cfg.data.test_dir.as_deref().expect("validated"), &cfg.data.normalization)?,
            ),
        };
        let data_key = match cfg.data.source {
            DataSource::Synthetic => cache_key(&(&cfg.data.synthetic, &cfg.data.normalization))?,
            DataSource::Folder => {
                let mut h = Vec::new();
                for ds in [&train, &test] {
                    h.extend_from_slice(&serde_json::to_vec(&(&ds.ids, &ds.labels))?);
                    for i in 0..ds.len() {
                        for v in ds.image(i) {
                            h.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                sha256_hex(&h)[..16].to_string()
            }
        };
        Ok(Pipeline {
            cfg,
            store,
            train,
            test,
            data_key,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn train_set(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    fn model(&self, tag: &str, m: &config::ModelConfig) -> Result<Model> {
        if let Some(path) = &m.checkpoint {
            let net = load_network(path)?;
            let key = param_checksum(&net)[..16].to_string();
            return Ok(Model { net, key, history: Vec::new() });
        }
        let arch = m.arch.as_ref().expect("validated");
        let key = cache_key(&(tag, SCHEMA, arch, &m.train, &self.data_key))?;
        let name = format!("{tag}-{key}.xdps");
        if self.store.exists(&name) {
            let mut ck = self.store.read_checkpoint(&name)?;
            let history = serde_json::from_str(ck.meta.get("history").map(String::as_str).unwrap_or("[]"))?;
            return Ok(Model {
                net: ck.networks.remove(0),
                key,
                history,
            });
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(m.train.seed);
        let mut net = arch.build(&mut rng)?;
        let history = tagged(tag, train_classifier(&mut net, &self.train, &m.train, |_, _| {}))?;
        let mut ck = Checkpoint::single(net.clone());
        ck.meta.insert("history".into(), serde_json::to_string(&history)?);
        self.store.write_checkpoint(&name, &ck)?;
        Ok(Model { net, key, history })
    }

    fn validate(&self, base: &Model, edge: &Model) -> Result<ValidationReport> {
        let verdict = tagged("validate", validate_pair(&base.net, &edge.net, &self.test))?;
        Ok(ValidationReport {
            schema: SCHEMA.into(),
            verdict,
            min_gap: MIN_ACCURACY_GAP,
            base_checksum: param_checksum(&base.net),
            edge_checksum: param_checksum(&edge.net),
            base_history: base.history.clone(),
            edge_history: edge.history.clone(),
        })
    }

    fn extract(&self, folded: &Network, base_key: &str) -> Result<(SubgraphSpec, ExtractionReport, String)> {
        let key = cache_key(&("extract", SCHEMA, base_key, &self.data_key, &self.cfg.extraction, &self.cfg.finetune))?;
        let (ck_name, json_name) = (format!("extract-{key}.xdps"), format!("extract-{key}.json"));
        if self.store.exists(&ck_name) && self.store.exists(&json_name) {
            let report: ExtractionReport = self.store.read_json(&json_name)?;
            if report.base_checksum != param_checksum(folded) {
                return Err(Error::Consistency("extraction artifact was built from another base".into()));
            }
            let mut ck = self.store.read_checkpoint(&ck_name)?;
            let network = ck.networks.remove(0);
            let masks = masks_from_records(&network, &report.masks)?;
            let sub = SubgraphSpec {
                truncate_at: network.split(),
                network,
                masks,
                layers: report.layers.clone(),
            };
            return Ok((sub, report, key));
        }
        let cfg = &self.cfg.extraction;
        let mut ext = tagged("extract", build_extended_network(folded, &cfg.candidates, cfg.k))?;
        let coefficient_trace = tagged("extract", train_sparsity_coefficients(&mut ext, &self.train, cfg))?;
        let sub = tagged("extract", extract_subgraph(folded, &ext.state))?;
        let (sub, finetune_trace) = tagged("extract", fine_tune_subgraph(&sub, &self.train, &self.cfg.finetune))?;
        let report = ExtractionReport {
            schema: SCHEMA.into(),
            base_checksum: param_checksum(folded),
            layers: sub.layers.clone(),
            masks: masks_to_records(&sub.masks),
            coefficient_trace,
            finetune_trace,
            masked_weight_mass: sub.masked_weight_mass(),
        };
        self.store.write_checkpoint(&ck_name, &Checkpoint::single(sub.network.clone()))?;
        self.store.write_json(&json_name, &report)?;
        Ok((sub, report, key))
    }

    fn assemble(&self, sub: &SubgraphSpec, folded: &Network, edge: &Network, upstream: &str) -> Result<(DeltaNetwork, AssemblyReport, String)> {
        let seed = config::derive_seed(self.cfg.seed, "delta-init");
        let key = cache_key(&("assemble", SCHEMA, upstream, param_checksum(edge), &self.cfg.delta, seed))?;
        let (ck_name, json_name) = (format!("assemble-{key}.xdps"), format!("assemble-{key}.json"));
        if self.store.exists(&ck_name) && self.store.exists(&json_name) {
            let d = delta_from_checkpoint(self.store.read_checkpoint(&ck_name)?, folded, edge)?;
            return Ok((d, self.store.read_json(&json_name)?, key));
        }
        let (d, cut) = tagged("assemble", assemble_within_budget(sub, folded, edge, &self.cfg.delta, seed))?;
        let names = ["branch", "refiner", "adapter", "resizer"];
        let components = names
            .iter()
            .zip(d.components())
            .map(|(n, net)| Ok((n.to_string(), network_cost(net)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let report = AssemblyReport {
            schema: SCHEMA.into(),
            base_checksum: param_checksum(folded),
            edge_checksum: param_checksum(edge),
            truncate_at: cut.truncate_at,
            d_f: d.d_f()?,
            components,
            delta_cost: d.cost()?,
            edge_cost: network_cost(edge)?,
            base_cost: network_cost(folded)?,
        };
        self.store.write_checkpoint(&ck_name, &delta_checkpoint(&d, folded, edge))?;
        self.store.write_json(&json_name, &report)?;
        Ok((d, report, key))
    }

    fn train_stage(&self, init: &DeltaNetwork, folded: &Network, edge: &Network, upstream: &str) -> Result<(DeltaNetwork, TrainingReport, String)> {
        let key = cache_key(&("train", SCHEMA, upstream, &self.cfg.loss, &self.cfg.delta_training))?;
        let (ck_name, json_name) = (format!("train-{key}.xdps"), format!("train-{key}.json"));
        if self.store.exists(&ck_name) && self.store.exists(&json_name) {
            let d = delta_from_checkpoint(self.store.read_checkpoint(&ck_name)?, folded, edge)?;
            return Ok((d, self.store.read_json(&json_name)?, key));
        }
        let mut d = init.clone();
        let run = tagged(
            "train",
            train_delta(&mut d, folded, edge, &self.train, Some(&self.test), &self.cfg.loss, &self.cfg.delta_training),
        )?;
        let subset = complementary_subset(folded, edge, &self.test)?;
        let correlation = if subset.is_empty() {
            CorrelationReport {
                subset_size: 0,
                correlation_score: None,
                error_correlation_score: None,
            }
        } else {
            let [f_e, f_d, f_f, f_b] = dataset_features(&d, folded, edge, &self.test.subset(&subset))?;
            CorrelationReport {
                subset_size: subset.len(),
                correlation_score: correlation_score(&f_e, &f_d, &f_f).ok(),
                error_correlation_score: error_correlation_score(&f_e, &f_d, &f_b).ok(),
            }
        };
        let report = TrainingReport {
            schema: SCHEMA.into(),
            run,
            correlation,
        };
        self.store.write_checkpoint(&ck_name, &delta_checkpoint(&d, folded, edge))?;
        self.store.write_json(&json_name, &report)?;
        Ok((d, report, key))
    }

    fn analyze(&self, d: &DeltaNetwork, folded: &Network, edge: &Network) -> Result<Vec<ImageAnalysis>> {
        let mut out = tagged(
            "analyze",
            analyze_dataset(d, folded, edge, &self.test, &self.cfg.analysis, &GroundTruthLabeler),
        )?;
        out.sort_by(|a, b| a.record.image_id.cmp(&b.record.image_id));
        Ok(out)
    }

    /// Runs every stage up to and including `last`.
    pub fn run(&self, last: Stage) -> Result<RunOutput> {
        let bundle = self.cfg.out_dir.join("report");
        if bundle.exists() {
            std::fs::remove_dir_all(&bundle)?;
        }
        std::fs::create_dir_all(&bundle)?;
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();

        let base = self.model("base", &self.cfg.base)?;
        let edge = self.model("edge", &self.cfg.edge)?;
        let validation = self.validate(&base, &edge)?;
        files.insert("validation.json".into(), pretty_json(&validation)?);
        let mut out = RunOutput {
            bundle_dir: bundle.clone(),
            validation: validation.clone(),
            extraction: None,
            assembly: None,
            training: None,
            records: None,
            geometric: None,
            semantic: None,
            ratios: None,
        };
        let finish = |files: &BTreeMap<String, Vec<u8>>| -> Result<()> {
            let mut manifest = Manifest {
                schema: SCHEMA.into(),
                files: BTreeMap::new(),
            };
            for (name, bytes) in files {
                let path = bundle.join(name);
                if let Some(p) = path.parent() {
                    std::fs::create_dir_all(p)?;
                }
                std::fs::write(&path, bytes)?;
                manifest.files.insert(name.clone(), sha256_hex(bytes));
            }
            std::fs::write(bundle.join("manifest.json"), pretty_json(&manifest)?)?;
            Ok(())
        };
        if !validation.verdict.compatible {
            finish(&files)?;
            return Err(Error::IncompatiblePair(format!(
                "base accuracy {:.4} and edge accuracy {:.4} differ by {:.4}, below the required {:.2}",
                validation.verdict.base_accuracy, validation.verdict.edge_accuracy, validation.verdict.gap, MIN_ACCURACY_GAP
            )));
        }
        if last == Stage::Validate {
            finish(&files)?;
            return Ok(out);
        }

        let folded = base.net.fold_batch_norm()?;
        let (sub, extraction, ex_key) = self.extract(&folded, &base.key)?;
        files.insert("extraction.json".into(), pretty_json(&extraction)?);
        out.extraction = Some(extraction);
        if last == Stage::Extract {
            finish(&files)?;
            return Ok(out);
        }

        let (init, assembly, as_key) = self.assemble(&sub, &folded, &edge.net, &ex_key)?;
        files.insert("assembly.json".into(), pretty_json(&assembly)?);
        out.assembly = Some(assembly.clone());
        if last == Stage::Assemble {
            finish(&files)?;
            return Ok(out);
        }

        let (trained, training, _) = self.train_stage(&init, &folded, &edge.net, &as_key)?;
        files.insert("training.json".into(), pretty_json(&training)?);
        files.insert("training_trace.jsonl".into(), json_lines(&training.run.trace)?);
        out.training = Some(training.clone());
        if last == Stage::Train {
            finish(&files)?;
            return Ok(out);
        }

        let analyses = self.analyze(&trained, &folded, &edge.net)?;
        let records: Vec<ExplanationRecord> = analyses.iter().map(|a| a.record.clone()).collect();
        files.insert("explanations.jsonl".into(), json_lines(&records)?);
        let (geometric, semantic) = if records.is_empty() {
            let empty = GeometricSummary {
                schema: SCHEMA.into(),
                records: 0,
                category_counts: crate::analysis::GeometricCategory::ALL.iter().map(|&c| (c, 0)).collect(),
                mean_overlap: crate::analysis::GeometricCategory::ALL.iter().map(|&c| (c, None)).collect(),
            };
            let sem = SemanticSummary {
                schema: SCHEMA.into(),
                records: 0,
                labeled_records: 0,
                top_concepts: Vec::new(),
            };
            (empty, sem)
        } else {
            split_summary(&summarize(&records, self.cfg.analysis.top_k)?, &records)
        };
        files.insert("geometric_summary.json".into(), pretty_json(&geometric)?);
        files.insert("semantic_summary.json".into(), pretty_json(&semantic)?);
        for a in analyses.iter().take(self.cfg.overlays) {
            let path = bundle.join("overlays").join(format!("{}.png", a.record.image_id));
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            let idx = a.record.index;
            write_overlay(&path, &self.test, idx, a, &self.cfg.data.normalization)?;
            files.insert(format!("overlays/{}.png", a.record.image_id), std::fs::read(&path)?);
        }
        out.records = Some(records);
        out.geometric = Some(geometric.clone());
        out.semantic = Some(semantic.clone());
        if last == Stage::Analyze {
            finish(&files)?;
            return Ok(out);
        }

        let eval = training.run.final_eval.clone().ok_or_else(|| Error::Consistency("training recorded no evaluation".into()))?;
        let ratios = compute_ratios(&assembly.delta_cost, &assembly.edge_cost, &assembly.base_cost, eval.fused_acc, eval.edge_acc, eval.base_acc)?;
        if !ratios.budget_satisfied {
            return Err(Error::Consistency("emitted DELTA violates the cost budget".into()));
        }
        files.insert("ratio_report.json".into(), pretty_json(&ratios)?);
        if geometric.records > 0 {
            for name in emit_summary_plots(&bundle, &geometric, &semantic)? {
                files.insert(name.clone(), std::fs::read(bundle.join(&name))?);
            }
        }
        out.ratios = Some(ratios);
        finish(&files)?;
        Ok(out)
    }
}

/// Convenience wrapper: builds the pipeline and runs it through `last`.
pub fn run_pipeline(cfg: &PipelineConfig, last: Stage) -> Result<RunOutput> {
    Pipeline::new(cfg)?.run(last)
}

/// Serializable view of a stage list for logs.
#[derive(Serialize)]
pub struct StageList(pub Vec<Stage>);
