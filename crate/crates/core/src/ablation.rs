//! Ablation harness: sweeps one axis (predictor depth, masking strategy,
//! masking ratio or VICReg on/off), trains one model per setting and trial,
//! and tabulates held-out retrieval F1.

use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, OutputConfig, RetrievalConfig, RunConfig, METRICS_FILE, SCHEMA_VERSION};
use crate::data::ArchiveRecord;
use crate::error::{Error, FieldError, Result};
use crate::losses::VicregConfig;
use crate::masking::MaskConfig;
use crate::model::ModelConfig;
use crate::retrieval::{build_index, evaluate_archive};
use crate::training::{fit, FitOptions, TrainConfig, TrainState, FINAL_CHECKPOINT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    PredictorDepth,
    MaskingStrategy,
    MaskingRatio,
    Vicreg,
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::PredictorDepth => "predictor_depth",
            AblationAxis::MaskingStrategy => "masking_strategy",
            AblationAxis::MaskingRatio => "masking_ratio",
            AblationAxis::Vicreg => "vicreg",
        })
    }
}

/// One value along an axis, as written in the spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting {
    Flag(bool),
    Int(u64),
    Float(f64),
    Name(String),
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Flag(true) => f.write_str("on"),
            Setting::Flag(false) => f.write_str("off"),
            Setting::Int(v) => write!(f, "{v}"),
            Setting::Float(v) => write!(f, "{v}"),
            Setting::Name(s) => f.write_str(s),
        }
    }
}

/// A sweep over one axis. Everything except the swept field comes from the
/// base sections, which use the same layout as a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub schema_version: u32,
    pub axis: AblationAxis,
    pub values: Vec<Setting>,
    #[serde(default = "default_trials")]
    pub trials: usize,
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

fn default_trials() -> usize {
    3
}

impl AblationSpec {
    pub fn new(axis: AblationAxis, values: Vec<Setting>, trials: usize, base: RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            axis,
            values,
            trials,
            data: base.data,
            model: base.model,
            train: base.train,
            retrieval: base.retrieval,
            output: base.output,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let (spec, mut errs): (Self, _) = crate::config::parse_toml(text)?;
        errs.extend(spec.field_errors());
        if errs.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (&spec.data.path, path.parent()) {
            if p.is_relative() {
                spec.data.path = Some(dir.join(p));
            }
        }
        Ok(spec)
    }

    pub fn base(&self) -> RunConfig {
        RunConfig {
            schema_version: self.schema_version,
            data: self.data.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            retrieval: self.retrieval.clone(),
            output: self.output.clone(),
        }
    }

    /// The base config with `setting` substituted on the swept axis.
    pub fn apply(&self, setting: &Setting) -> std::result::Result<RunConfig, String> {
        let mut cfg = self.base();
        match (self.axis, setting) {
            (AblationAxis::PredictorDepth, Setting::Int(d)) if *d >= 1 => cfg.model.predictor.depth = *d as usize,
            (AblationAxis::PredictorDepth, _) => return Err("expected a depth >= 1".into()),
            (AblationAxis::MaskingStrategy, Setting::Name(name)) => {
                let ratio = cfg.train.mask.target_ratio;
                let base = &cfg.train.mask;
                let mut mask = match name.as_str() {
                    "random_disjoint" => MaskConfig::random(ratio),
                    "multi_block" => MaskConfig::multi_block(ratio),
                    other => return Err(format!("unknown strategy `{other}`")),
                };
                mask.block_scale = base.block_scale;
                mask.block_aspect = base.block_aspect;
                if mask.strategy == base.strategy {
                    mask.n_target_groups = base.n_target_groups;
                }
                cfg.train.mask = mask;
            }
            (AblationAxis::MaskingStrategy, _) => return Err("expected random_disjoint or multi_block".into()),
            (AblationAxis::MaskingRatio, Setting::Float(r)) => cfg.train.mask.target_ratio = *r,
            (AblationAxis::MaskingRatio, _) => return Err("expected a ratio such as 0.25".into()),
            (AblationAxis::Vicreg, s) => {
                let on = match s {
                    Setting::Flag(b) => *b,
                    Setting::Name(n) if n == "on" => true,
                    Setting::Name(n) if n == "off" => false,
                    _ => return Err("expected on/off or true/false".into()),
                };
                cfg.train.vicreg = match (on, self.train.vicreg.is_disabled()) {
                    (false, _) => VicregConfig::disabled(),
                    (true, true) => VicregConfig::default(),
                    (true, false) => self.train.vicreg.clone(),
                };
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = self.base().field_errors();
        if self.values.is_empty() {
            errs.push(FieldError::new("values", "must list at least one setting"));
        }
        if self.trials == 0 {
            errs.push(FieldError::new("trials", "must be at least 1"));
        }
        if errs.is_empty() {
            for (i, v) in self.values.iter().enumerate() {
                if let Err(msg) = self.apply(v) {
                    errs.push(FieldError::new(format!("values[{i}]"), msg));
                }
            }
            let mut names: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
            names.sort();
            names.dedup();
            if names.len() != self.values.len() {
                errs.push(FieldError::new("values", "settings must be distinct"));
            }
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
}

/// Outcome of one (setting, trial) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub setting: String,
    pub trial: usize,
    pub seed: u64,
    /// Held-out mean F1@k; `None` if the run failed.
    pub f1: Option<f64>,
    /// Mean per-dimension standard deviation of the held-out embeddings.
    pub embed_std: Option<f64>,
    pub error: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// `None` when every trial of the setting failed.
    pub mean_f1: Option<f64>,
    /// Sample standard deviation over successful trials (0 for one trial).
    pub std: Option<f64>,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    /// One row per setting, best mean F1 first.
    pub rows: Vec<AblationRow>,
    pub trials: Vec<TrialRecord>,
    pub warnings: Vec<String>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,mean_f1,std,n_trials\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.setting, opt(r.mean_f1), opt(r.std), r.n_trials).unwrap();
        }
        out
    }
}

/// Where run artifacts go and who hears about finished trials.
#[derive(Default)]
pub struct AblationOptions<'a> {
    /// Each run writes `<dir>/<axis>-<setting>/trial-<t>/{final.ckpt, metrics.ndjson}`.
    pub runs_dir: Option<PathBuf>,
    pub on_trial: Option<&'a mut dyn FnMut(&TrialRecord)>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates a single configuration: fit on `train`, then
/// held-out F1 and embedding spread on `holdout`.
pub fn run_trial(
    cfg: &RunConfig,
    train: &[ArchiveRecord],
    holdout: &[ArchiveRecord],
    dir: Option<&std::path::Path>,
) -> Result<(f64, f64, TrainState)> {
    let mut state = TrainState::new(cfg.model.clone(), cfg.train.clone(), train.len())?;
    let opts = FitOptions {
        checkpoint_dir: dir.map(|d| d.to_path_buf()),
        metrics_path: dir.map(|d| d.join(METRICS_FILE)),
        stop_at_step: None,
    };
    if let Some(d) = dir {
        // a stale stream from an earlier run would be appended to
        let _ = std::fs::remove_file(d.join(METRICS_FILE));
    }
    fit(&mut state, train, &opts)?;
    let index = build_index(&state.model, holdout, cfg.retrieval.metric)?;
    let report = evaluate_archive(&index, &index, cfg.retrieval.k)?;
    let embed_std = index.matrix.std_axis(Axis(0), 1.0).mean().unwrap_or(0.0);
    Ok((report.mean_f1, embed_std, state))
}

/// Runs `|values| x trials` trainings. Trial `t` uses seed `base seed + t`,
/// so settings are compared on identical seeds. Failed trials are kept in
/// the record list with their error and left out of the row statistics.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &[ArchiveRecord],
    holdout: &[ArchiveRecord],
    mut options: AblationOptions<'_>,
) -> Result<AblationTable> {
    spec.validate()?;
    let mut trials = Vec::new();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for value in &spec.values {
        let setting = value.to_string();
        let mut f1s = Vec::new();
        for t in 0..spec.trials {
            let mut cfg = spec.apply(value).map_err(|m| Error::config("values", m))?;
            cfg.train.seed = spec.train.seed.wrapping_add(t as u64);
            let dir = options
                .runs_dir
                .as_ref()
                .map(|d| d.join(format!("{}-{setting}", spec.axis)).join(format!("trial-{t}")));
            let record = match run_trial(&cfg, train, holdout, dir.as_deref()) {
                Ok((f1, embed_std, _)) => {
                    f1s.push(f1);
                    TrialRecord {
                        setting: setting.clone(),
                        trial: t,
                        seed: cfg.train.seed,
                        f1: Some(f1),
                        embed_std: Some(embed_std),
                        error: None,
                        checkpoint: dir.as_ref().map(|d| d.join(FINAL_CHECKPOINT)),
                        metrics: dir.as_ref().map(|d| d.join(METRICS_FILE)),
                    }
                }
                Err(e) => {
                    warnings.push(format!("{}={setting} trial {t} failed: {e}", spec.axis));
                    TrialRecord {
                        setting: setting.clone(),
                        trial: t,
                        seed: cfg.train.seed,
                        f1: None,
                        embed_std: None,
                        error: Some(e.to_string()),
                        checkpoint: None,
                        metrics: dir.as_ref().map(|d| d.join(METRICS_FILE)),
                    }
                }
            };
            if let Some(cb) = options.on_trial.as_mut() {
                cb(&record);
            }
            trials.push(record);
        }
        let (mean_f1, std) = if f1s.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&f1s);
            (Some(m), Some(s))
        };
        rows.push(AblationRow {
            setting,
            mean_f1,
            std,
            n_trials: f1s.len(),
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &AblationRow| r.mean_f1.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    Ok(AblationTable {
        axis: spec.axis,
        rows,
        trials,
        warnings,
    })
}
