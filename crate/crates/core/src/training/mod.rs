//! Training loop: masking, objective, AdamW update, EMA, metrics, checkpoints.

mod checkpoint;
mod monitor;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use monitor::{collapse_monitor, CollapseDiagnostics};
pub use schedule::{ema_schedule, lr_schedule, warmup_steps, wd_schedule};

use crate::data::{ArchiveRecord, PatchSequence};
use crate::error::{Error, FieldError, Result};
use crate::losses::VicregConfig;
use crate::masking::{sample_mask, MaskConfig, MaskPair};
use crate::model::{ema_update, ModelConfig, ModelState};
use crate::nn::Parameters;
use crate::optim::AdamW;
use crate::rng::{derive_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: u64,
    pub wd_init: f64,
    pub wd_final: f64,
    pub ema_init: f64,
    pub seed: u64,
    pub mask: MaskConfig,
    pub vicreg: VicregConfig,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr_init: 1e-4,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            warmup_epochs: 15,
            wd_init: 0.04,
            wd_final: 0.4,
            ema_init: 0.996,
            seed: 0,
            mask: MaskConfig::default(),
            vicreg: VicregConfig::default(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let f = |n: &str| format!("{prefix}{n}");
        if self.epochs == 0 {
            errs.push(FieldError::new(f("epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            errs.push(FieldError::new(f("batch_size"), "must be at least 1"));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            errs.push(FieldError::new(f("lr_init"), "must be > 0"));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak >= self.lr_init) {
            errs.push(FieldError::new(f("lr_peak"), "must be >= lr_init"));
        }
        if !(self.lr_final.is_finite() && self.lr_final >= 0.0 && self.lr_final <= self.lr_peak) {
            errs.push(FieldError::new(f("lr_final"), "must lie in [0, lr_peak]"));
        }
        if self.warmup_epochs > self.epochs {
            errs.push(FieldError::new(f("warmup_epochs"), "must not exceed epochs"));
        }
        for (name, v) in [("wd_init", self.wd_init), ("wd_final", self.wd_final)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(FieldError::new(f(name), "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_init) {
            errs.push(FieldError::new(f("ema_init"), "must lie in [0, 1]"));
        }
        errs.extend(self.mask.field_errors(&f("mask.")));
        errs.extend(self.vicreg.field_errors(&f("vicreg.")));
        if !self.vicreg.is_disabled() && self.batch_size < 2 {
            errs.push(FieldError::new(f("batch_size"), "VICReg needs at least 2 images per batch"));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.field_errors("");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
    #[serde(rename = "L_pred")]
    pub l_pred: f64,
    pub v: f64,
    pub c: f64,
    #[serde(rename = "L_inv")]
    pub l_inv: f64,
    pub total: f64,
    /// Mean per-dimension std of the batch's pooled context embeddings.
    pub embed_std: f64,
    pub eff_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub config: TrainConfig,
    /// Registered over context encoder and predictor only.
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Training-set size the step counters refer to.
    pub n_train: usize,
    pub history: Vec<StepMetrics>,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig, n_train: usize) -> Result<Self> {
        let mut errs = model_config.encoder.field_errors("encoder.");
        errs.extend(model_config.predictor.field_errors("predictor."));
        errs.extend(config.field_errors("train."));
        if errs.is_empty() {
            if let Err(Error::Config(e)) = config.mask.validate_for(model_config.encoder.n_tokens()) {
                errs.extend(e.into_iter().map(|fe| FieldError::new(format!("train.mask.{}", fe.field), fe.message)));
            }
        }
        if n_train < config.batch_size {
            errs.push(FieldError::new(
                "train.batch_size",
                format!("exceeds the training set size {n_train}"),
            ));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let model = ModelState::new(model_config, config.seed)?;
        let optimizer = AdamW::new(&model.trainable_params());
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
            epoch: 0,
            n_train,
            history: Vec::new(),
        })
    }

    /// Incomplete trailing batches are dropped.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.n_train / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Masks for the current step, one per batch position.
    pub fn sample_masks(&self, batch_len: usize) -> Result<Vec<MaskPair>> {
        let grid = self.model.config.encoder.grid();
        (0..batch_len)
            .map(|i| {
                let mut rng = derive_rng(self.config.seed, Stream::Mask, self.step, i as u64);
                sample_mask(grid, &self.config.mask, &mut rng)
            })
            .collect()
    }
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, Stream::Shuffle, epoch, 0));
    order
}

/// One optimizer step on a batch of records.
pub fn train_step(state: &mut TrainState, batch: &[ArchiveRecord]) -> Result<StepMetrics> {
    let patches = batch
        .iter()
        .map(|r| state.model.patchify(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PatchSequence> = patches.iter().collect();
    train_step_patches(state, &refs)
}

pub(crate) fn train_step_patches(state: &mut TrainState, batch: &[&PatchSequence]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let masks = state.sample_masks(batch.len())?;
    let step = state.step;
    let total = state.total_steps().max(step + 1);
    let (report, grads) = state
        .model
        .loss_and_grad(batch, &masks, &state.config.vicreg)
        .map_err(|e| match e {
            Error::Divergence { message, .. } => Error::Divergence {
                step: Some(step),
                message: match state.history.last() {
                    Some(last) => format!(
                        "{message}; last finite metrics: {}",
                        serde_json::to_string(last).unwrap_or_default()
                    ),
                    None => format!("{message}; no earlier finite step"),
                },
            },
            other => other,
        })?;
    let lr = lr_schedule(step, total, &state.config);
    let wd = wd_schedule(step, total, &state.config);
    let ema_m = ema_schedule(step, total, &state.config);
    let named = grads.named_params("");
    state
        .optimizer
        .step(state.model.trainable_params_mut(), &named, lr, wd)?;
    let ModelState { context, target, .. } = &mut state.model;
    ema_update(target, context, ema_m)?;
    let diag = collapse_monitor(&report.context_pooled).unwrap_or(CollapseDiagnostics {
        mean_std: 0.0,
        off_diagonal: 0.0,
        effective_rank: 0.0,
    });
    state.step += 1;
    let spe = state.steps_per_epoch().max(1);
    state.epoch = state.step / spe;
    let metrics = StepMetrics {
        step,
        epoch: step / spe,
        lr,
        wd,
        ema_m,
        l_pred: report.pred,
        v: report.vicreg.variance,
        c: report.vicreg.covariance,
        l_inv: report.vicreg.invariance,
        total: report.total,
        embed_std: diag.mean_std,
        eff_rank: diag.effective_rank,
    };
    state.history.push(metrics.clone());
    Ok(metrics)
}

/// Where `fit` writes its artifacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Rolling `latest.ckpt` every `checkpoint_every` epochs, `final.ckpt` at the end.
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics stream, appended one JSON object per line.
    pub metrics_path: Option<PathBuf>,
    /// Stop early once this many steps have completed in total.
    pub stop_at_step: Option<u64>,
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs (or resumes) training until the configured epochs are done.
///
/// The batch for step `s` depends only on the seed and `s`, so a state
/// loaded from a checkpoint continues exactly where it stopped.
pub fn fit(state: &mut TrainState, train: &[ArchiveRecord], options: &FitOptions) -> Result<()> {
    if train.len() != state.n_train {
        return Err(Error::Contract(format!(
            "state was created for {} training records, got {}",
            state.n_train,
            train.len()
        )));
    }
    let patches = train
        .iter()
        .map(|r| state.model.patchify(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let mut metrics = options.metrics_path.as_deref().map(MetricsWriter::open).transpose()?;
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spe = state.steps_per_epoch();
    let total = state.total_steps();
    let stop = options.stop_at_step.map_or(total, |s| s.min(total));
    let bs = state.config.batch_size;
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < stop {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = epoch_order(state.config.seed, epoch, train.len());
            order_epoch = epoch;
        }
        let offset = (state.step % spe) as usize;
        let batch: Vec<&PatchSequence> = order[offset * bs..(offset + 1) * bs].iter().map(|&i| &patches[i]).collect();
        let m = train_step_patches(state, &batch)?;
        if let Some(w) = metrics.as_mut() {
            w.write(&m)?;
        }
        let epoch_done = state.step % spe == 0;
        if let (Some(dir), true) = (&options.checkpoint_dir, epoch_done) {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch % every == 0 && state.step < total {
                if let Some(w) = metrics.as_mut() {
                    w.flush()?;
                }
                save_checkpoint(state, &dir.join(LATEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &options.checkpoint_dir {
        let name = if state.is_finished() { FINAL_CHECKPOINT } else { LATEST_CHECKPOINT };
        save_checkpoint(state, &dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_archive, SyntheticConfig};
    use crate::model::{EncoderConfig, PredictorConfig};

    pub(crate) fn small_setup(epochs: u64) -> (ModelConfig, TrainConfig, Vec<ArchiveRecord>) {
        let model = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 16,
                depth: 1,
                n_heads: 2,
                patch_size: 8,
                mlp_ratio: 2.0,
                input_bands: 2,
                image_size: 32,
            },
            predictor: PredictorConfig {
                embed_dim: 8,
                depth: 1,
                n_heads: 2,
                mlp_ratio: 2.0,
            },
        };
        let train = TrainConfig {
            epochs,
            batch_size: 4,
            warmup_epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let data = generate_synthetic_archive(&SyntheticConfig::new(12, 4, 2, 32, 5)).unwrap();
        (model, train, data)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mc, mut tc, data) = small_setup(1);
        tc.lr_init = 0.0;
        tc.lr_peak = 0.0;
        tc.lr_final = 0.0;
        tc.wd_init = 0.0;
        tc.wd_final = 0.0;
        let mut state = TrainState {
            model: ModelState::new(mc, 0).unwrap(),
            optimizer: AdamW::new(&[]),
            config: tc,
            step: 0,
            epoch: 0,
            n_train: data.len(),
            history: vec![],
        };
        state.optimizer = AdamW::new(&state.model.trainable_params());
        let before = state.model.clone();
        train_step(&mut state, &data[..4]).unwrap();
        assert_eq!(state.model, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn optimizer_never_sees_the_target_encoder() {
        let (mc, tc, data) = small_setup(1);
        let state = TrainState::new(mc, tc, data.len()).unwrap();
        assert!(!state.optimizer.names.is_empty());
        assert!(state.optimizer.names.iter().all(|n| n.starts_with("context.") || n.starts_with("predictor.")));
        assert!(state.optimizer.names.iter().any(|n| n == "predictor.mask_token"));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 20));
        assert_ne!(a, epoch_order(1, 1, 20));
    }

    #[test]
    fn invalid_train_config_lists_fields() {
        let (mc, mut tc, _) = small_setup(1);
        tc.lr_init = -1.0;
        tc.ema_init = 2.0;
        tc.warmup_epochs = 5;
        match TrainState::new(mc, tc, 12) {
            Err(Error::Config(f)) => {
                let names: Vec<_> = f.iter().map(|e| e.field.as_str()).collect();
                assert!(names.contains(&"train.lr_init"));
                assert!(names.contains(&"train.ema_init"));
                assert!(names.contains(&"train.warmup_epochs"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_counts_steps_and_writes_metrics() {
        let (mc, tc, data) = small_setup(2);
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::new(mc, tc, data.len()).unwrap();
        let opts = FitOptions {
            checkpoint_dir: Some(dir.path().join("ckpt")),
            metrics_path: Some(dir.path().join("metrics.ndjson")),
            stop_at_step: None,
        };
        fit(&mut state, &data, &opts).unwrap();
        assert_eq!(state.step, 6);
        assert_eq!(state.epoch, 2);
        let text = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["step", "epoch", "lr", "wd", "ema_m", "L_pred", "v", "c", "L_inv", "total", "embed_std", "eff_rank"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(dir.path().join("ckpt").join(FINAL_CHECKPOINT).exists());
    }
}
