//! Cosine ranking of a gallery against queries, and the retrieval metrics.
//!
//! Similarities are computed on `f32` descriptors with `f64` accumulation.
//! Gallery items are identified by their index in the gallery slice; equal
//! scores are ordered by ascending id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::View;
use crate::heads::Descriptor;
use crate::tensor::mft::{self, MftError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("descriptor length {found} does not match query length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query {0} has no ground-truth match in the gallery")]
    EmptyGroundTruth(usize),
    #[error("query {0} or its ranked gallery items lack scene coordinates")]
    MissingCoords(usize),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("decay must be positive, got {0}")]
    BadAlpha(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mft(#[from] MftError),
    #[error("descriptor table: {0}")]
    Table(String),
    #[error("descriptor table sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: usize,
    /// Gallery ids by descending similarity.
    pub order: Vec<usize>,
    /// `scores[i]` is the similarity of `order[i]`.
    pub scores: Vec<f32>,
    pub matches: BTreeSet<usize>,
    pub query_coords: Option<(f64, f64)>,
    /// Indexed by gallery id.
    pub gallery_coords: Vec<Option<(f64, f64)>>,
}

impl RankedResult {
    /// 1-based ranks of the ground-truth items, ascending.
    pub fn match_ranks(&self) -> Vec<usize> {
        self.order
            .iter()
            .enumerate()
            .filter(|(_, id)| self.matches.contains(id))
            .map(|(r, _)| r + 1)
            .collect()
    }

    pub fn gallery_len(&self) -> usize {
        self.order.len()
    }
}

/// `dot(a, b) / (‖a‖ ‖b‖)`, or 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())) as f32
}

/// Ranks the gallery for one query. Ground truth is every gallery item with
/// the query's class.
pub fn rank(query_id: usize, query: &Descriptor, gallery: &[Descriptor]) -> Result<RankedResult> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let d = query.values.len();
    if let Some(g) = gallery.iter().find(|g| g.values.len() != d) {
        return Err(EvalError::LengthMismatch {
            expected: d,
            found: g.values.len(),
        });
    }
    let sims: Vec<f32> = gallery.iter().map(|g| cosine(&query.values, &g.values)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(RankedResult {
        query_id,
        scores: order.iter().map(|&i| sims[i]).collect(),
        order,
        matches: gallery
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == query.class_id)
            .map(|(i, _)| i)
            .collect(),
        query_coords: query.coords,
        gallery_coords: gallery.iter().map(|g| g.coords).collect(),
    })
}

pub fn rank_all(queries: &[Descriptor], gallery: &[Descriptor]) -> Result<Vec<RankedResult>> {
    queries.iter().enumerate().map(|(i, q)| rank(i, q, gallery)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recall {
    pub value: f64,
    /// The K actually used.
    pub k: usize,
    pub warning: Option<String>,
}

/// Fraction of queries with a ground-truth item among the top K. A K larger
/// than the gallery is clamped and reported in `warning`.
pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<Recall> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let g = results.iter().map(|r| r.gallery_len()).min().unwrap_or(0);
    let (k_used, warning) = if k > g {
        let msg = format!("R@{k} clamped to gallery size {g}");
        log::warn!("{msg}");
        (g, Some(msg))
    } else {
        (k, None)
    };
    let hits = results
        .iter()
        .filter(|r| r.order[..k_used].iter().any(|id| r.matches.contains(id)))
        .count();
    Ok(Recall {
        value: hits as f64 / results.len() as f64,
        k: k_used,
        warning,
    })
}

/// Mean over ground-truth items of the precision at their rank.
pub fn query_average_precision(r: &RankedResult) -> Result<f64> {
    let ranks = r.match_ranks();
    if ranks.is_empty() {
        return Err(EvalError::EmptyGroundTruth(r.query_id));
    }
    let sum: f64 = ranks
        .iter()
        .enumerate()
        .map(|(j, &rank)| (j + 1) as f64 / rank as f64)
        .sum();
    Ok(sum / ranks.len() as f64)
}

/// Mean of per-query AP.
pub fn average_precision(results: &[RankedResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut total = 0.0;
    for r in results {
        total += query_average_precision(r)?;
    }
    Ok(total / results.len() as f64)
}

pub const DEFAULT_SDM_ALPHA: f64 = 1.0;

/// Rank-weighted, distance-decayed localisation score of one query:
/// `Σ w_i exp(−α d_i) / Σ w_i` with `w_i = K − i + 1` over the top K.
pub fn query_sdm(r: &RankedResult, k: usize, alpha: f64) -> Result<f64> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if !(alpha > 0.0) {
        return Err(EvalError::BadAlpha(alpha));
    }
    let q = r.query_coords.ok_or(EvalError::MissingCoords(r.query_id))?;
    let k = k.min(r.order.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &id) in r.order[..k].iter().enumerate() {
        let g = r
            .gallery_coords
            .get(id)
            .copied()
            .flatten()
            .ok_or(EvalError::MissingCoords(r.query_id))?;
        let d = ((q.0 - g.0).powi(2) + (q.1 - g.1).powi(2)).sqrt();
        let w = (k - i) as f64;
        num += w * (-alpha * d).exp();
        den += w;
    }
    Ok(num / den)
}

pub fn sdm_at_k(results: &[RankedResult], k: usize, alpha: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut total = 0.0;
    for r in results {
        total += query_sdm(r, k, alpha)?;
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub recall_ks: Vec<usize>,
    pub sdm_ks: Vec<usize>,
    pub sdm_alpha: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            recall_ks: vec![1, 5, 10],
            sdm_ks: vec![1, 3, 5],
            sdm_alpha: DEFAULT_SDM_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub gallery: usize,
    /// Keyed by the requested K.
    pub recall_at: BTreeMap<usize, f64>,
    pub ap_mean: f64,
    pub sdm_at: BTreeMap<usize, f64>,
    pub sdm_alpha: f64,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_results(results: &[RankedResult], cfg: &MetricConfig) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut recall_at = BTreeMap::new();
        for &k in &cfg.recall_ks {
            let r = recall_at_k(results, k)?;
            warnings.extend(r.warning);
            recall_at.insert(k, r.value);
        }
        let mut sdm_at = BTreeMap::new();
        for &k in &cfg.sdm_ks {
            sdm_at.insert(k, sdm_at_k(results, k, cfg.sdm_alpha)?);
        }
        Ok(Self {
            queries: results.len(),
            gallery: results.first().map_or(0, |r| r.gallery_len()),
            recall_at,
            ap_mean: average_precision(results)?,
            sdm_at,
            sdm_alpha: cfg.sdm_alpha,
            warnings,
        })
    }

    pub fn evaluate(queries: &[Descriptor], gallery: &[Descriptor], cfg: &MetricConfig) -> Result<Self> {
        Self::from_results(&rank_all(queries, gallery)?, cfg)
    }

    pub fn r1(&self) -> Option<f64> {
        self.recall_at.get(&1).copied()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["queries".to_string(), "gallery".to_string()];
        cols.extend(self.recall_at.keys().map(|k| format!("r@{k}")));
        cols.push("ap".into());
        cols.extend(self.sdm_at.keys().map(|k| format!("sdm@{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.queries.to_string(), self.gallery.to_string()];
        cols.extend(self.recall_at.values().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.ap_mean));
        cols.extend(self.sdm_at.values().map(|v| format!("{v:.6}")));
        cols.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub id: usize,
    pub view: View,
    pub class_id: u32,
    pub coords: Option<(f64, f64)>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes descriptors as an `n × d` MFT1 tensor plus a JSON sidecar with the
/// same stem holding ids, views, classes and coordinates.
pub fn write_descriptor_table(path: &Path, descs: &[Descriptor]) -> Result<()> {
    let d = descs.first().map_or(0, |x| x.values.len());
    if let Some(x) = descs.iter().find(|x| x.values.len() != d) {
        return Err(EvalError::LengthMismatch {
            expected: d,
            found: x.values.len(),
        });
    }
    let data: Vec<f32> = descs.iter().flat_map(|x| x.values.iter().copied()).collect();
    let t = Tensor::new(vec![descs.len(), d], data).map_err(|e| EvalError::Table(e.to_string()))?;
    mft::write(path, &t)?;
    let entries: Vec<TableEntry> = descs
        .iter()
        .enumerate()
        .map(|(id, x)| TableEntry {
            id,
            view: x.view,
            class_id: x.class_id,
            coords: x.coords,
        })
        .collect();
    let side = sidecar(path);
    let mut text = serde_json::to_string_pretty(&entries)?;
    text.push('\n');
    fs::write(&side, text).map_err(|source| EvalError::Io { path: side, source })
}

pub fn read_descriptor_table(path: &Path) -> Result<Vec<Descriptor>> {
    let t = mft::read::<f32>(path)?;
    let [n, d] = *t.shape() else {
        return Err(EvalError::Table(format!("expected a 2-D table, found {:?}", t.shape())));
    };
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|source| EvalError::Io { path: side, source })?;
    let entries: Vec<TableEntry> = serde_json::from_str(&text)?;
    if entries.len() != n {
        return Err(EvalError::Table(format!(
            "sidecar lists {} entries for {n} rows",
            entries.len()
        )));
    }
    Ok(entries
        .into_iter()
        .zip(t.data().chunks(d.max(1)))
        .map(|(e, row)| Descriptor {
            values: row[..d].to_vec(),
            view: e.view,
            class_id: e.class_id,
            coords: e.coords,
        })
        .collect())
}
