//! Images, archives and patch tokenization.

mod archive;
mod synthetic;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{load_archive, read_archive_raw, read_raw_image, write_archive, write_raw_image};
pub use synthetic::{generate_synthetic_archive, split_holdout, SyntheticConfig};

pub type LabelSet = BTreeSet<String>;

/// One multi-band image, stored band-major as `bands × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    values: Array3<f64>,
}

impl ImageTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty image {c}x{h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("image contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_vec(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let values = Array3::from_shape_vec((bands, height, width), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values)
    }

    pub fn bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRecord {
    pub id: String,
    pub image: ImageTensor,
    pub labels: LabelSet,
}

/// Row-major patch tokens of one image.
///
/// Token `r * cols + c` covers pixel rows `r*p..(r+1)*p` and columns
/// `c*p..(c+1)*p`; within a token the layout is band, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub bands: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<PatchSequence> {
    let (c, h, w) = image.values.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}"
        )));
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let dim = c * patch_size * patch_size;
    let mut tokens = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for q in 0..cols {
            let mut token = tokens.row_mut(r * cols + q);
            let mut k = 0;
            for b in 0..c {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        token[k] = image.values[[b, r * patch_size + y, q * patch_size + x]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens,
        grid: (rows, cols),
        patch_size,
        bands: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> Result<ImageTensor> {
    let (rows, cols) = seq.grid;
    let p = seq.patch_size;
    if seq.len() != rows * cols || seq.token_dim() != seq.bands * p * p {
        return Err(Error::Shape(format!(
            "patch sequence of {} tokens x {} does not match grid {rows}x{cols}, patch {p}, {} bands",
            seq.len(),
            seq.token_dim(),
            seq.bands
        )));
    }
    let mut values = Array3::zeros((seq.bands, rows * p, cols * p));
    for r in 0..rows {
        for q in 0..cols {
            let token = seq.tokens.row(r * cols + q);
            let mut k = 0;
            for b in 0..seq.bands {
                for y in 0..p {
                    for x in 0..p {
                        values[[b, r * p + y, q * p + x]] = token[k];
                        k += 1;
                    }
                }
            }
        }
    }
    ImageTensor::new(values)
}

/// Per-band mean and standard deviation over an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn fit(records: &[ArchiveRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::config("archive", "archive is empty"))?;
        let bands = first.image.bands();
        let mut sum = vec![0.0; bands];
        let mut sum_sq = vec![0.0; bands];
        let mut count = vec![0usize; bands];
        for rec in records {
            if rec.image.bands() != bands {
                return Err(Error::Ingestion {
                    record: rec.id.clone(),
                    message: format!("expected {bands} bands, found {}", rec.image.bands()),
                });
            }
            for (b, band) in rec.image.values.outer_iter().enumerate() {
                for &v in band.iter() {
                    sum[b] += v;
                    sum_sq[b] += v * v;
                }
                count[b] += band.len();
            }
        }
        let mut mean = Vec::with_capacity(bands);
        let mut std = Vec::with_capacity(bands);
        for b in 0..bands {
            let n = count[b] as f64;
            let m = sum[b] / n;
            let var = (sum_sq[b] / n - m * m).max(0.0);
            mean.push(m);
            // constant bands are only centered
            std.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &mut ImageTensor) -> Result<()> {
        if image.bands() != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization expects {} bands, image has {}",
                self.mean.len(),
                image.bands()
            )));
        }
        for (b, mut band) in image.values_mut().outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[b], self.std[b]);
            band.mapv_inplace(|v| (v - m) / s);
        }
        Ok(())
    }
}

/// Standardizes every band to zero mean and unit variance over the archive.
pub fn standardize_archive(records: &mut [ArchiveRecord]) -> Result<BandStats> {
    let stats = BandStats::fit(records)?;
    for rec in records.iter_mut() {
        stats.apply(&mut rec.image)?;
    }
    Ok(stats)
}
