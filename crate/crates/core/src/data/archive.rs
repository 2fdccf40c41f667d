//! On-disk archive: `manifest.json` plus one raw tensor file per image.
//!
//! Raw image layout (little endian): three `u32` (bands, height, width)
//! followed by `bands * height * width` `f32` values, band-major.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{standardize_archive, ArchiveRecord, BandStats, ImageTensor, LabelSet};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    file: String,
    labels: Vec<String>,
}

pub fn write_raw_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let (c, h, w) = image.values().dim();
    let mut buf = Vec::with_capacity(12 + 4 * c * h * w);
    for dim in [c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in image.values().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn decode_raw(bytes: &[u8], record: &str) -> Result<ImageTensor> {
    let bad = |message: String| Error::Ingestion {
        record: record.to_string(),
        message,
    };
    if bytes.len() < 12 {
        return Err(bad(format!("file has {} bytes, header needs 12", bytes.len())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if n == 0 {
        return Err(bad(format!("empty image {c}x{h}x{w}")));
    }
    if bytes.len() != 12 + 4 * n {
        return Err(bad(format!(
            "header declares {c}x{h}x{w} ({} bytes) but file has {} bytes",
            12 + 4 * n,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad(format!("non-finite value at flat offset {i}")));
        }
        data.push(v as f64);
    }
    ImageTensor::from_vec(c, h, w, data).map_err(|e| bad(e.to_string()))
}

pub fn read_raw_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, &path.display().to_string())
}

/// Reads an archive without normalization.
pub fn read_archive_raw(dir: &Path) -> Result<Vec<ArchiveRecord>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("malformed manifest: {e}")))?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    let mut shape = None;
    for entry in entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Ingestion {
                record: entry.id,
                message: "duplicate id".into(),
            });
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let image = decode_raw(&bytes, &entry.id)?;
        let dim = image.values().dim();
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => {
                return Err(Error::Ingestion {
                    record: entry.id,
                    message: format!("shape {dim:?} differs from archive shape {s:?}"),
                })
            }
            _ => {}
        }
        records.push(ArchiveRecord {
            id: entry.id,
            image,
            labels: entry.labels.into_iter().collect::<LabelSet>(),
        });
    }
    Ok(records)
}

/// Reads an archive and standardizes each band over it. The returned
/// statistics normalize further images from the same source.
pub fn load_archive(dir: &Path) -> Result<(Vec<ArchiveRecord>, BandStats)> {
    let mut records = read_archive_raw(dir)?;
    if records.is_empty() {
        return Err(Error::format(dir.join(MANIFEST), "manifest lists no records"));
    }
    let stats = standardize_archive(&mut records)?;
    Ok((records, stats))
}

pub fn write_archive(dir: &Path, records: &[ArchiveRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let file = format!("{i:06}.raw");
        write_raw_image(&dir.join(&file), &rec.image)?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            file,
            labels: rec.labels.iter().cloned().collect(),
        });
    }
    let manifest = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))
}
