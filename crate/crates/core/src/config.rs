//! Run configuration: one TOML file describing data, model, training,
//! retrieval and output locations.
//!
//! Parsing collects every unknown key and every out-of-range value before
//! failing, so a broken file is reported in one pass.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_archive, load_archive, split_holdout, ArchiveRecord, BandStats, SyntheticConfig};
use crate::error::{Error, FieldError, Result};
use crate::model::ModelConfig;
use crate::retrieval::Metric;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `output.dir` as the destination of the metrics stream.
pub const METRICS_DIR_ENV: &str = "REJEPA_METRICS_DIR";
pub const METRICS_FILE: &str = "metrics.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Archive directory; required when `source = "archive"`. Relative paths
    /// resolve against the config file's directory.
    pub path: Option<PathBuf>,
    /// Records split off the end of the archive for evaluation.
    pub holdout: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            holdout: 128,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub metric: Metric,
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Checkpoints go here; so does the metrics stream unless overridden.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Training and held-out records plus the normalization that produced them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<ArchiveRecord>,
    pub holdout: Vec<ArchiveRecord>,
    pub band_stats: BandStats,
}

/// Deserializes `text`, returning unknown keys as field errors instead of
/// silently dropping them. Callers merge these with their own validation.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<(T, Vec<FieldError>)> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
    let value: T = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| Error::config("<file>", e.message().to_string()))?;
    Ok((value, unknown.into_iter().map(|p| FieldError::new(p, "unknown key")).collect()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let (cfg, mut errs): (Self, _) = parse_toml(text)?;
        errs.extend(cfg.field_errors());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Reads and validates a config file. A relative `data.path` is
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(FieldError::new(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        errs.extend(self.model.field_errors("model."));
        errs.extend(self.train.field_errors("train."));
        if self.model.encoder.field_errors("").is_empty() && self.train.mask.field_errors("").is_empty() {
            let n = self.model.encoder.n_tokens();
            if let Err(Error::Config(es)) = self.train.mask.validate_for(n) {
                errs.extend(es.into_iter().map(|e| FieldError::new(format!("train.mask.{}", e.field), e.message)));
            }
        }
        match self.data.source {
            DataSource::Synthetic => {
                let s = &self.data.synthetic;
                if let Err(Error::Config(es)) = s.validate() {
                    errs.extend(es.into_iter().map(|e| FieldError::new(format!("data.synthetic.{}", e.field), e.message)));
                }
                let enc = &self.model.encoder;
                if s.side != enc.image_size {
                    errs.push(FieldError::new("data.synthetic.side", "must equal model.encoder.image_size"));
                }
                if s.bands != enc.input_bands {
                    errs.push(FieldError::new("data.synthetic.bands", "must equal model.encoder.input_bands"));
                }
                if self.data.holdout >= s.n_images {
                    errs.push(FieldError::new("data.holdout", "must be smaller than data.synthetic.n_images"));
                } else if s.n_images - self.data.holdout < self.train.batch_size {
                    errs.push(FieldError::new("data.holdout", "leaves fewer training images than train.batch_size"));
                }
            }
            DataSource::Archive => {
                if self.data.path.is_none() {
                    errs.push(FieldError::new("data.path", "required when data.source = \"archive\""));
                }
            }
        }
        if self.data.holdout == 0 {
            errs.push(FieldError::new("data.holdout", "must be at least 1"));
        }
        if self.retrieval.k == 0 {
            errs.push(FieldError::new("retrieval.k", "must be at least 1"));
        } else if self.retrieval.k >= self.data.holdout.max(1) {
            errs.push(FieldError::new("retrieval.k", "must be smaller than data.holdout"));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.field_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Generates or loads the archive and splits off the held-out records.
    pub fn prepare_data(&self) -> Result<PreparedData> {
        let (records, band_stats) = match self.data.source {
            DataSource::Synthetic => {
                let records = generate_synthetic_archive(&self.data.synthetic)?;
                let stats = BandStats::fit(&records)?;
                (records, stats)
            }
            DataSource::Archive => {
                let path = self
                    .data
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::config("data.path", "required when data.source = \"archive\""))?;
                load_archive(path)?
            }
        };
        let (train, holdout) = split_holdout(records, self.data.holdout)?;
        Ok(PreparedData {
            train,
            holdout,
            band_stats,
        })
    }

    /// Directory of the metrics stream: the environment override if set,
    /// otherwise `output.dir`.
    pub fn metrics_dir(&self) -> PathBuf {
        match std::env::var_os(METRICS_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }
}
