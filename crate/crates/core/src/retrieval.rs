//! Exact k-NN retrieval over pooled embeddings and label-set F1@k.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ArchiveRecord, BandStats, LabelSet};
use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModelState};
use crate::rng::{derive_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors are at distance 1 from everything.
    Cosine,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config("metric", format!("unknown metric `{other}`"))),
        }
    }
}

/// Name of the F1 protocol, reported alongside every score.
pub const F1_PROTOCOL: &str = "mean_over_retrieved_label_set_f1";

/// Pooled embeddings of an archive, one row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub ids: Vec<String>,
    pub labels: Vec<LabelSet>,
    pub matrix: Array2<f64>,
    pub metric: Metric,
    /// Normalization applied to the archive before embedding, if known.
    pub band_stats: Option<BandStats>,
}

impl FeatureIndex {
    pub fn new(ids: Vec<String>, labels: Vec<LabelSet>, matrix: Array2<f64>, metric: Metric) -> Result<Self> {
        let index = Self {
            ids,
            labels,
            matrix,
            metric,
            band_stats: None,
        };
        index.check()?;
        Ok(index)
    }

    fn check(&self) -> Result<()> {
        let n = self.matrix.nrows();
        if n == 0 {
            return Err(Error::config("archive", "feature index needs at least one record"));
        }
        if self.ids.len() != n || self.labels.len() != n {
            return Err(Error::Shape(format!(
                "index has {n} rows, {} ids and {} label sets",
                self.ids.len(),
                self.labels.len()
            )));
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("index rows must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_f1: f64,
    pub k: usize,
    pub metric: Metric,
    pub protocol: String,
    pub per_query: Vec<RetrievalResult>,
}

pub fn distance(metric: Metric, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - a.dot(&b) / (na * nb)
            }
        }
    }
}

/// Pooled target-encoder embeddings of every record, in archive order.
pub fn build_index(model: &ModelState, records: &[ArchiveRecord], metric: Metric) -> Result<FeatureIndex> {
    if records.is_empty() {
        return Err(Error::config("archive", "cannot index an empty archive"));
    }
    let images: Vec<_> = records.iter().map(|r| &r.image).collect();
    let matrix = model.embed_images(&images, EncoderKind::Target)?;
    FeatureIndex::new(
        records.iter().map(|r| r.id.clone()).collect(),
        records.iter().map(|r| r.labels.clone()).collect(),
        matrix,
        metric,
    )
}

struct Candidate<'a> {
    distance: f64,
    id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// The `k` nearest rows to `vector`, nearest first, ties by ascending id.
/// Rows whose id equals `exclude` are skipped.
pub fn query(index: &FeatureIndex, vector: ArrayView1<f64>, k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
    if vector.len() != index.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, index has {}",
            vector.len(),
            index.dim()
        )));
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("query vector must be finite".into()));
    }
    let excluded = exclude.map_or(0, |id| index.ids.iter().filter(|i| *i == id).count());
    let available = index.len() - excluded;
    if k == 0 || k > available {
        return Err(Error::Contract(format!(
            "k = {k} must lie in 1..={available} (archive size {}{})",
            index.len(),
            if excluded > 0 { ", query excluded" } else { "" }
        )));
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (row, id) in index.matrix.rows().into_iter().zip(&index.ids) {
        if exclude == Some(id.as_str()) {
            continue;
        }
        let c = Candidate {
            distance: distance(index.metric, vector, row),
            id,
        };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(c);
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| Neighbor {
            id: c.id.to_string(),
            distance: c.distance,
        })
        .collect())
}

/// Mean over the first `k` retrieved items of the label-set F1 between the
/// query labels and each item's labels.
pub fn f1_at_k(query_labels: &LabelSet, neighbor_labels: &[&LabelSet], k: usize) -> Result<f64> {
    if query_labels.is_empty() {
        return Err(Error::Evaluation("query has an empty label set".into()));
    }
    if k == 0 || neighbor_labels.len() < k {
        return Err(Error::Evaluation(format!(
            "F1@{k} needs {k} neighbors, got {}",
            neighbor_labels.len()
        )));
    }
    let total: f64 = neighbor_labels[..k]
        .iter()
        .map(|r| {
            let hit = query_labels.intersection(r).count() as f64;
            if hit == 0.0 {
                0.0
            } else {
                let p = hit / r.len() as f64;
                let rc = hit / query_labels.len() as f64;
                2.0 * p * rc / (p + rc)
            }
        })
        .sum();
    Ok(total / k as f64)
}

/// Queries every row of `queries` against `index`, excluding equal ids.
pub fn evaluate_archive(index: &FeatureIndex, queries: &FeatureIndex, k: usize) -> Result<EvalReport> {
    if index.dim() != queries.dim() {
        return Err(Error::Shape("query and index embeddings differ in width".into()));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for (i, id) in queries.ids.iter().enumerate() {
        let neighbors = query(index, queries.matrix.row(i), k, Some(id))?;
        let labels: Vec<&LabelSet> = neighbors
            .iter()
            .map(|n| &index.labels[index.position(&n.id).expect("neighbor comes from the index")])
            .collect();
        let f1 = f1_at_k(&queries.labels[i], &labels, k)?;
        per_query.push(RetrievalResult {
            query_id: id.clone(),
            neighbors,
            f1,
        });
    }
    let mean_f1 = per_query.iter().map(|r| r.f1).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        mean_f1,
        k,
        metric: index.metric,
        protocol: F1_PROTOCOL.to_string(),
        per_query,
    })
}

/// Index the records with `model` and evaluate each against the rest.
pub fn evaluate_model(model: &ModelState, records: &[ArchiveRecord], metric: Metric, k: usize) -> Result<EvalReport> {
    let index = build_index(model, records, metric)?;
    evaluate_archive(&index, &index, k)
}

/// Mean F1@k under `n_perm` random relabelings of the index: returns the
/// mean and standard deviation of the null distribution.
pub fn label_permutation_null(index: &FeatureIndex, k: usize, n_perm: usize, seed: u64) -> Result<(f64, f64)> {
    if n_perm < 2 {
        return Err(Error::config("n_perm", "need at least 2 permutations"));
    }
    let neighbors: Vec<Vec<usize>> = (0..index.len())
        .map(|i| {
            query(index, index.matrix.row(i), k, Some(&index.ids[i]))
                .map(|ns| ns.iter().map(|n| index.position(&n.id).expect("from index")).collect())
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(n_perm);
    for p in 0..n_perm {
        let mut perm: Vec<usize> = (0..index.len()).collect();
        perm.shuffle(&mut derive_rng(seed, Stream::Permutation, p as u64, 0));
        let mut total = 0.0;
        for (i, ns) in neighbors.iter().enumerate() {
            let labels: Vec<&LabelSet> = ns.iter().map(|&j| &index.labels[perm[j]]).collect();
            total += f1_at_k(&index.labels[perm[i]], &labels, k)?;
        }
        scores.push(total / index.len() as f64);
    }
    let mean = scores.iter().sum::<f64>() / n_perm as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_perm as f64 - 1.0);
    Ok((mean, var.sqrt()))
}

const INDEX_MAGIC: &[u8; 8] = b"REJEPAIX";
const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    metric: Metric,
    ids: Vec<String>,
    labels: Vec<LabelSet>,
    band_stats: Option<BandStats>,
    rows: usize,
    dim: usize,
}

/// Magic, version, JSON header (ids, labels, metric, band stats), then the
/// row-major little-endian `f64` matrix.
pub fn save_index(index: &FeatureIndex, path: &Path) -> Result<()> {
    let header = IndexHeader {
        metric: index.metric,
        ids: index.ids.clone(),
        labels: index.labels.clone(),
        band_stats: index.band_stats.clone(),
        rows: index.len(),
        dim: index.dim(),
    };
    let header = serde_json::to_vec(&header).expect("index header serializes");
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * index.matrix.len());
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in index.matrix.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<FeatureIndex> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if data.len() < 20 || &data[..8] != INDEX_MAGIC {
        return Err(bad("not a feature index (bad magic)"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(bad(&format!("unsupported index version {version}")));
    }
    let hlen = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    let body = data.get(20..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: IndexHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
    let values = &body[hlen..];
    if values.len() != header.rows * header.dim * 8 {
        return Err(bad(&format!(
            "matrix holds {} bytes, expected {} x {} f64",
            values.len(),
            header.rows,
            header.dim
        )));
    }
    let flat: Vec<f64> = values.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let matrix = Array2::from_shape_vec((header.rows, header.dim), flat).expect("size checked");
    let mut index = FeatureIndex::new(header.ids, header.labels, matrix, header.metric)
        .map_err(|e| bad(&e.to_string()))?;
    index.band_stats = header.band_stats;
    Ok(index)
}
