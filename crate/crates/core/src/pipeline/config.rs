use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::data::{Normalization, SyntheticConfig};
use crate::delta::DeltaConfig;
use crate::error::{Error, Result};
use crate::nn::arch::VggConfig;
use crate::nn::train::{Augment, Method, SgdConfig, TrainConfig};
use crate::sparsity::{ExtractionConfig, SparsityCandidates};
use crate::training::{DeltaTrainConfig, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Validate,
    Extract,
    Assemble,
    Train,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Validate,
        Stage::Extract,
        Stage::Assemble,
        Stage::Train,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Extract => "extract",
            Stage::Assemble => "assemble",
            Stage::Train => "train",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    /// Class-per-folder image trees for `source = "folder"`.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            train_dir: None,
            test_dir: None,
            normalization: Normalization::default(),
        }
    }
}

/// A model is either loaded from a checkpoint or trained from `arch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Option<VggConfig>,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: None,
            checkpoint: None,
            train: TrainConfig::default(),
        }
    }
}

fn adam(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        sgd: SgdConfig {
            method: Method::Adam,
            lr: 0.003,
            decay: 0.95,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stochastic choice is derived from this seed; per-module seed
    /// fields are overwritten.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub base: ModelConfig,
    pub edge: ModelConfig,
    pub extraction: ExtractionConfig,
    pub finetune: TrainConfig,
    pub delta: DeltaConfig,
    pub loss: LossWeights,
    pub delta_training: DeltaTrainConfig,
    pub analysis: AnalysisConfig,
    /// Number of analyzed images written as region overlays.
    pub overlays: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("xdelta-run"),
            data: DataConfig::default(),
            base: ModelConfig {
                arch: Some(VggConfig::vgg16_style([16, 16, 32, 32, 32], 10)),
                checkpoint: None,
                train: adam(15),
            },
            edge: ModelConfig {
                arch: Some(VggConfig::vgg8_style([4, 8, 16, 16, 16], 10)),
                checkpoint: None,
                train: adam(15),
            },
            // lowest three rates of each set: the narrow desk-scale base does
            // not recover from the ~50% pruning a uniform search over the
            // full sets settles on
            extraction: ExtractionConfig {
                candidates: SparsityCandidates {
                    conv: vec![0.125, 0.25, 0.375],
                    linear: vec![0.2, 0.4, 0.6],
                },
                ..Default::default()
            },
            finetune: TrainConfig {
                augment: Augment::default(),
                ..adam(10)
            },
            delta: DeltaConfig::default(),
            loss: LossWeights::default(),
            delta_training: DeltaTrainConfig::default(),
            analysis: AnalysisConfig {
                max_images: 50,
                ..Default::default()
            },
            overlays: 16,
        }
    }
}

/// Stable 64-bit seed for one named consumer.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `a.b.c = value` inside a TOML tree, creating tables as needed.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses a config layered over the defaults, so a partial table such as
    /// `[base.train]` keeps every default it does not mention.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut table: toml::Table = Self::default().to_toml()?.parse().map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.data.train_dir,
            &mut self.data.test_dir,
            &mut self.base.checkpoint,
            &mut self.edge.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Overwrites every per-module seed from the pipeline seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.data.synthetic.seed = derive_seed(s, "data");
        c.base.train.seed = derive_seed(s, "base");
        c.edge.train.seed = derive_seed(s, "edge");
        c.extraction.seed = derive_seed(s, "extraction");
        c.finetune.seed = derive_seed(s, "finetune");
        c.delta_training.seed = derive_seed(s, "delta-training");
        c
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                Some(p) if !p.exists() => Err(Error::Config(format!("{what} {} does not exist", p.display()))),
                _ => Ok(()),
            }
        };
        if self.data.source == DataSource::Folder {
            if self.data.train_dir.is_none() || self.data.test_dir.is_none() {
                return Err(Error::Config("folder data needs train_dir and test_dir".into()));
            }
            exists(&self.data.train_dir, "train_dir")?;
            exists(&self.data.test_dir, "test_dir")?;
        }
        for (name, m) in [("base", &self.base), ("edge", &self.edge)] {
            if m.arch.is_none() && m.checkpoint.is_none() {
                return Err(Error::Config(format!("{name} needs an arch to train or a checkpoint to load")));
            }
            exists(&m.checkpoint, &format!("{name} checkpoint"))?;
        }
        if self.extraction.k == 0 {
            return Err(Error::Config("extraction.k must be at least 1".into()));
        }
        self.extraction.candidates.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.analysis.validate()?;
        if self.delta.se_reduction == 0 {
            return Err(Error::Config("delta.se_reduction must be positive".into()));
        }
        Ok(())
    }
}
