//! Run configuration: a TOML document with `dataset`, `encoder`, `train`,
//! `eval`, `gradcheck` and `ablate` sections. Omitted fields take their
//! defaults; unknown fields are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gen_synthetic, load_cifar, CifarVariant, DataError, LabeledDataset, NormStats, SyntheticSpec};
use crate::encoder::{EncoderConfig, ProjectorSpec};
use crate::eval::{EvalPatches, ProbeConfig};
use crate::nn::{LayerSpec, Precision};
use crate::trainer::{GradCheckConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid field `{field}`: {msg}")]
    Validation { field: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 64,
            test_per_class: 32,
            size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR binary files, concatenated in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_paths: Vec<PathBuf>,
    /// Keep only the first N training / test images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    /// Standardization statistics; filled in during resolution when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
}

impl DatasetConfig {
    pub fn synthetic(spec: SyntheticConfig) -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            train_paths: Vec::new(),
            test_paths: Vec::new(),
            train_limit: None,
            test_limit: None,
            synthetic: spec,
            norm: None,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                if s.size < 16 {
                    return Err(invalid(&format!("{field}.synthetic.size"), "must be >= 16"));
                }
                if s.classes < 2 || s.per_class == 0 || s.test_per_class == 0 {
                    return Err(invalid(
                        &format!("{field}.synthetic"),
                        "needs classes >= 2 and at least one train and test image per class",
                    ));
                }
            }
            _ => {
                for (name, paths) in [("train_paths", &self.train_paths), ("test_paths", &self.test_paths)] {
                    if paths.is_empty() {
                        return Err(invalid(&format!("{field}.{name}"), "at least one file is required"));
                    }
                    if let Some(p) = paths.iter().find(|p| !p.exists()) {
                        return Err(invalid(&format!("{field}.{name}"), format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        if let Some(n) = &self.norm {
            if n.std.iter().any(|s| !(*s > 0.0)) {
                return Err(invalid(&format!("{field}.norm.std"), "entries must be > 0"));
            }
        }
        Ok(())
    }

    fn variant(&self) -> CifarVariant {
        match self.kind {
            DatasetKind::Cifar100 => CifarVariant::Cifar100,
            _ => CifarVariant::Cifar10,
        }
    }

    fn load_files(&self, paths: &[PathBuf], limit: Option<usize>) -> std::result::Result<LabeledDataset, DataError> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in paths {
            let ds = load_cifar(p, self.variant())?;
            images.extend(ds.images);
            labels.extend(ds.labels);
        }
        let ds = LabeledDataset::new(images, labels, self.variant().num_classes())?;
        Ok(match limit {
            Some(n) => ds.truncated(n),
            None => ds,
        })
    }

    /// Train and test splits.
    pub fn load(&self) -> std::result::Result<(LabeledDataset, LabeledDataset), DataError> {
        match self.kind {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                let train = gen_synthetic(&SyntheticSpec {
                    classes: s.classes,
                    per_class: s.per_class,
                    size: s.size,
                    seed: s.seed,
                })?;
                let test = gen_synthetic(&SyntheticSpec {
                    classes: s.classes,
                    per_class: s.test_per_class,
                    size: s.size,
                    seed: s.seed.wrapping_add(1),
                })?;
                let limit = |ds: LabeledDataset, n: Option<usize>| match n {
                    Some(n) => ds.truncated(n),
                    None => ds,
                };
                Ok((limit(train, self.train_limit), limit(test, self.test_limit)))
            }
            _ => Ok((
                self.load_files(&self.train_paths, self.train_limit)?,
                self.load_files(&self.test_paths, self.test_limit)?,
            )),
        }
    }

    /// Configured statistics, or the CIFAR-10 constants, or statistics of
    /// the training split.
    pub fn norm_for(&self, train: &LabeledDataset) -> NormStats {
        match (self.norm, self.kind) {
            (Some(n), _) => n,
            (None, DatasetKind::Cifar10) => NormStats::cifar10(),
            (None, _) => train.channel_stats(),
        }
    }
}

/// Either a preset name or a full encoder description. Fields given next to
/// a preset override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<ProjectorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<Vec<LayerSpec>>,
}

impl EncoderSection {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        let mut cfg = match (&self.preset, &self.backbone) {
            (Some(_), Some(_)) => {
                return Err(invalid("encoder.backbone", "give either a preset or a backbone, not both"));
            }
            (_, Some(backbone)) => EncoderConfig {
                backbone: backbone.clone(),
                projector: self
                    .projector
                    .ok_or_else(|| invalid("encoder.projector", "required with a custom backbone"))?,
                precision: Precision::Double,
            },
            (preset, None) => EncoderConfig::preset(preset.as_deref().unwrap_or("desk"))
                .map_err(|e| invalid("encoder.preset", e.to_string()))?,
        };
        if let Some(p) = self.projector {
            cfg.projector = p;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate().map_err(|e| invalid("encoder", e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_config(cfg: &EncoderConfig) -> Self {
        Self {
            preset: None,
            projector: Some(cfg.projector),
            precision: Some(cfg.precision),
            backbone: Some(cfg.backbone.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Probe,
    Knn,
    Transfer,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "probe" => Ok(Protocol::Probe),
            "knn" => Ok(Protocol::Knn),
            "transfer" => Ok(Protocol::Transfer),
            other => Err(format!("unknown protocol {other:?} (probe, knn, transfer)")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Probe => "probe",
            Protocol::Knn => "knn",
            Protocol::Transfer => "transfer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    pub m_eval: usize,
    pub k: usize,
    /// Crop and input sizes; default to the training values.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_size: Option<usize>,
    /// Seed of the evaluation crop locations.
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Named out-of-domain datasets for the transfer protocol.
    pub targets: BTreeMap<String, DatasetConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Probe, Protocol::Knn],
            m_eval: 128,
            k: 20,
            patch_size: None,
            out_size: None,
            seed: 0,
            probe: ProbeConfig::default(),
            targets: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Patch counts; empty means the training value.
    pub n: Vec<usize>,
    /// Batch sizes; empty means the training value.
    pub batch: Vec<usize>,
    /// Seeds averaged per cell; empty means the run seed.
    pub seeds: Vec<u64>,
    /// Fixed iteration count per cell; defaults to the training schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gradcheck: GradCheckConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a config document. The run seed and deterministic
/// flag are copied into the training section.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        if let Some(rest) = msg.strip_prefix("unknown field `") {
            let field = rest.split('`').next().unwrap_or_default().to_string();
            return ConfigError::Validation { field, msg };
        }
        if let Some(rest) = msg.strip_prefix("missing field `") {
            let field = rest.split('`').next().unwrap_or_default().to_string();
            return ConfigError::Validation { field, msg };
        }
        ConfigError::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg,
        }
    })?;
    cfg.train.seed = cfg.seed;
    cfg.train.deterministic = cfg.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

impl RunConfig {
    /// Minimal synthetic-data configuration with every other field at its
    /// default.
    pub fn synthetic(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            deterministic: false,
            out_dir: default_out_dir(),
            dataset: DatasetConfig::synthetic(SyntheticConfig::default()),
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
            ablate: AblateConfig::default(),
        };
        cfg.train.seed = seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.seed != self.seed || self.train.deterministic != self.deterministic {
            return Err(invalid("train.seed", "must match the run seed and deterministic flag"));
        }
        self.dataset.validate("dataset")?;
        for (name, t) in &self.eval.targets {
            t.validate(&format!("eval.targets.{name}"))?;
        }
        let enc = self.encoder.resolve()?;
        self.train.validate().map_err(|msg| {
            let field = msg.split_whitespace().next().unwrap_or("train").to_string();
            invalid(&format!("train.{field}"), msg)
        })?;
        enc.embed_dim(self.train.out_size)
            .map_err(|e| invalid("train.out_size", e.to_string()))?;
        let min_side = match self.dataset.kind {
            DatasetKind::Synthetic => self.dataset.synthetic.size,
            _ => 32,
        };
        if self.train.patch_size > min_side {
            return Err(invalid(
                "train.patch_size",
                format!("{} exceeds the image side {min_side}", self.train.patch_size),
            ));
        }
        let e = &self.eval;
        if e.m_eval == 0 {
            return Err(invalid("eval.m_eval", "must be >= 1"));
        }
        if e.k == 0 {
            return Err(invalid("eval.k", "must be >= 1"));
        }
        if e.probe.batch_size == 0 || !(e.probe.lr > 0.0) {
            return Err(invalid("eval.probe", "needs batch_size >= 1 and lr > 0"));
        }
        if self.ablate.n.iter().any(|&n| n < 2) {
            return Err(invalid("ablate.n", "patch counts must be >= 2"));
        }
        if self.ablate.batch.iter().any(|&b| b < 2) {
            return Err(invalid("ablate.batch", "batch sizes must be >= 2"));
        }
        if self.ablate.steps == Some(0) {
            return Err(invalid("ablate.steps", "must be >= 1"));
        }
        let g = &self.gradcheck;
        if g.n_patches < 2 || g.batch_size < 2 || g.size == 0 || !(g.step > 0.0) {
            return Err(invalid("gradcheck", "needs n_patches >= 2, batch_size >= 2, size >= 1, step > 0"));
        }
        Ok(())
    }

    pub fn eval_patches(&self) -> EvalPatches {
        EvalPatches {
            m_eval: self.eval.m_eval,
            patch: self.eval.patch_size.unwrap_or(self.train.patch_size),
            out: self.eval.out_size.unwrap_or(self.train.out_size),
        }
    }

    /// Copy with presets expanded and defaults made explicit, so that the
    /// serialized form reproduces the run on its own.
    pub fn resolved(&self, norm: NormStats) -> Result<Self> {
        let mut out = self.clone();
        out.encoder = EncoderSection::from_config(&self.encoder.resolve()?);
        out.dataset.norm = Some(norm);
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}
