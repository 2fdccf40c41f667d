//! Class-structured procedural textures for desk-scale experiments.
//!
//! Each class owns a few planar sinusoids (integer frequency vectors) and a
//! band-mixing matrix. Images of a class share those and differ in phase,
//! amplitude and additive Gaussian noise. Each class also owns a base phase
//! per component; an image draws its phase uniformly within
//! `±phase_spread·π` of it. At spread 1 the mean image of every class is
//! zero. Below 1 a weak phase-coherent signal survives in raw pixels, while
//! most of the class identity still lives in texture statistics.
//!
//! On top of the texture every image gets a random brightness offset per
//! band, shared by all its pixels. The offset carries no class information
//! but dominates the raw pixel energy, so an untrained encoder ranks
//! neighbours mostly by brightness.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{standardize_archive, ArchiveRecord, ImageTensor, LabelSet};
use crate::error::{Error, FieldError, Result};
use crate::rng::{derive_rng, Stream};

const COMPONENTS: usize = 2;
const MAX_FREQUENCY: i64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub n_classes: usize,
    pub bands: usize,
    pub side: usize,
    pub seed: u64,
    /// Noise standard deviation relative to unit component amplitude.
    pub noise: f64,
    /// Standard deviation of a per-image, per-band brightness offset.
    pub band_offset: f64,
    /// Half-width of the per-image phase interval, as a fraction of π.
    pub phase_spread: f64,
}

impl Default for SyntheticConfig {
    /// 640 images in 4 classes: 512 for training plus 128 held out.
    fn default() -> Self {
        Self::new(640, 4, 3, 32, 42)
    }
}

impl SyntheticConfig {
    pub fn new(n_images: usize, n_classes: usize, bands: usize, side: usize, seed: u64) -> Self {
        Self {
            n_images,
            n_classes,
            bands,
            side,
            seed,
            noise: 0.2,
            band_offset: 2.0,
            phase_spread: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_classes < 2 {
            errs.push(FieldError::new("n_classes", "must be at least 2"));
        } else if self.n_classes * COMPONENTS > frequency_candidates().len() {
            errs.push(FieldError::new(
                "n_classes",
                format!("at most {} classes supported", frequency_candidates().len() / COMPONENTS),
            ));
        }
        if self.n_images < self.n_classes {
            errs.push(FieldError::new("n_images", "must be at least n_classes"));
        }
        if self.bands == 0 {
            errs.push(FieldError::new("bands", "must be at least 1"));
        }
        if self.side < 2 * MAX_FREQUENCY as usize + 1 {
            errs.push(FieldError::new(
                "side",
                format!("must be at least {} to resolve every frequency", 2 * MAX_FREQUENCY + 1),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            errs.push(FieldError::new("noise", "must be finite and non-negative"));
        }
        if !(self.band_offset.is_finite() && self.band_offset >= 0.0) {
            errs.push(FieldError::new("band_offset", "must be finite and non-negative"));
        }
        if !(self.phase_spread > 0.0 && self.phase_spread <= 1.0) {
            errs.push(FieldError::new("phase_spread", "must lie in (0, 1]"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

struct ClassFamily {
    freqs: [(i64, i64); COMPONENTS],
    mixing: Array2<f64>,
    phases: [f64; COMPONENTS],
}

/// Integer frequency vectors with `2 <= |f| <= MAX_FREQUENCY`, one of each
/// `±f` pair.
fn frequency_candidates() -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for fx in -MAX_FREQUENCY..=MAX_FREQUENCY {
        for fy in 0..=MAX_FREQUENCY {
            if fy == 0 && fx <= 0 {
                continue;
            }
            let r2 = fx * fx + fy * fy;
            if (4..=MAX_FREQUENCY * MAX_FREQUENCY).contains(&r2) {
                out.push((fx, fy));
            }
        }
    }
    out
}

fn class_families(cfg: &SyntheticConfig) -> Vec<ClassFamily> {
    let mut candidates = frequency_candidates();
    let mut rng = derive_rng(cfg.seed, Stream::Synthetic, u64::MAX, 0);
    candidates.shuffle(&mut rng);
    (0..cfg.n_classes)
        .map(|c| {
            let freqs = [candidates[COMPONENTS * c], candidates[COMPONENTS * c + 1]];
            let mut mixing = Array2::<f64>::zeros((cfg.bands, COMPONENTS));
            for mut row in mixing.rows_mut() {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let norm = row.dot(&row).sqrt().max(1e-12);
                row.mapv_inplace(|v| v / norm);
            }
            let phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
            ClassFamily { freqs, mixing, phases }
        })
        .collect()
}

/// Generates `n_images` records, image `i` belonging to class `i mod n_classes`,
/// standardized per band over the whole archive.
pub fn generate_synthetic_archive(cfg: &SyntheticConfig) -> Result<Vec<ArchiveRecord>> {
    cfg.validate()?;
    let families = class_families(cfg);
    let side = cfg.side;
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut records = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let class = i % cfg.n_classes;
        let fam = &families[class];
        let mut rng = derive_rng(cfg.seed, Stream::Synthetic, i as u64, 1);
        let mut components = Array3::<f64>::zeros((COMPONENTS, side, side));
        for k in 0..COMPONENTS {
            let (fx, fy) = fam.freqs[k];
            let half = cfg.phase_spread * PI;
            let phase = fam.phases[k] + rng.random_range(-half..half);
            let amp = rng.random_range(0.8..1.2);
            for ((_, y, x), v) in components.slice_mut(ndarray::s![k..k + 1, .., ..]).indexed_iter_mut() {
                let arg = 2.0 * PI * (fx as f64 * x as f64 + fy as f64 * y as f64) / side as f64;
                *v = amp * (arg + phase).sin();
            }
        }
        let offsets: Vec<f64> = (0..cfg.bands)
            .map(|_| cfg.band_offset * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut values = Array3::<f64>::zeros((cfg.bands, side, side));
        for ((b, y, x), v) in values.indexed_iter_mut() {
            let mut acc = 0.0;
            for k in 0..COMPONENTS {
                acc += fam.mixing[[b, k]] * components[[k, y, x]];
            }
            *v = offsets[b] + acc + noise.sample(&mut rng);
        }
        records.push(ArchiveRecord {
            id: format!("synthetic-{i:05}"),
            image: ImageTensor::new(values)?,
            labels: LabelSet::from([format!("class-{class}")]),
        });
    }
    standardize_archive(&mut records)?;
    Ok(records)
}

/// Splits off the last `holdout` records, keeping class balance when
/// `holdout` is a multiple of the class count (records cycle through classes).
pub fn split_holdout(
    mut records: Vec<ArchiveRecord>,
    holdout: usize,
) -> Result<(Vec<ArchiveRecord>, Vec<ArchiveRecord>)> {
    if holdout >= records.len() {
        return Err(Error::config(
            "holdout",
            format!("must be smaller than the archive size {}", records.len()),
        ));
    }
    let held = records.split_off(records.len() - holdout);
    Ok((records, held))
}
