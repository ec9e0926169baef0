//! Exact similarity search over feature-space embeddings, and attention
//! fusion of retrieved context: `h' = softmax((W_q h) · Vᵀ) V`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
    pub timestamp: Option<NaiveDate>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
            metadata: BTreeMap::new(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
}

/// Flat exact index. Records are kept sorted by id so persistence and
/// tie-breaking are independent of insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    metric: Similarity,
    records: BTreeMap<String, EmbeddingRecord>,
}

/// Metadata stored next to the binary vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    dimension: usize,
    metric: Similarity,
    metadata: BTreeMap<String, BTreeMap<String, String>>,
    timestamps: BTreeMap<String, NaiveDate>,
}

const FORMAT_VERSION: u32 = 1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl VectorIndex {
    pub fn new(dimension: usize, metric: Similarity) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dimension,
            metric,
            records: BTreeMap::new(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> Similarity {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.get(id)
    }

    /// Inserts or replaces records. Validation happens before any change, so
    /// a failed batch leaves the index untouched.
    pub fn upsert(&mut self, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<()> {
        let batch: Vec<EmbeddingRecord> = records.into_iter().collect();
        for r in &batch {
            if r.vector.len() != self.dimension {
                return Err(Error::DimensionMismatch {
                    id: r.id.clone(),
                    expected: self.dimension,
                    found: r.vector.len(),
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("vector `{}` has non-finite entries", r.id)));
            }
        }
        for r in batch {
            self.records.insert(r.id.clone(), r);
        }
        Ok(())
    }

    fn score(&self, q: &[f64], q_norm: f64, v: &[f64]) -> f64 {
        match self.metric {
            Similarity::Dot => dot(q, v),
            Similarity::Cosine => {
                let vn = norm(v);
                if vn == 0.0 {
                    0.0
                } else {
                    dot(q, v) / (q_norm * vn)
                }
            }
        }
    }

    /// The `k` most similar records, by descending similarity then id.
    pub fn query_topk(&self, q: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::InvalidInput("query against an empty index".into()));
        }
        if q.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dimension,
                found: q.len(),
            });
        }
        let q_norm = norm(q);
        if self.metric == Similarity::Cosine && q_norm == 0.0 {
            return Err(Error::ZeroNormQuery);
        }
        let mut hits: Vec<Hit> = self
            .records
            .values()
            .map(|r| Hit {
                id: r.id.clone(),
                similarity: self.score(q, q_norm, &r.vector),
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Stacks the vectors of `hits` as the rows of a context matrix.
    pub fn context_matrix(&self, hits: &[Hit]) -> Vec<Vec<f64>> {
        hits.iter()
            .filter_map(|h| self.records.get(&h.id).map(|r| r.vector.clone()))
            .collect()
    }

    /// Binary layout (little-endian): `u64 d`, `u64 count`, then per record
    /// `u32 id length`, id bytes; then all vectors row-major as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.dimension as u64).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for id in self.records.keys() {
            let bytes = id.as_bytes();
            let len = u32::try_from(bytes.len()).map_err(|_| Error::InvalidInput(format!("id too long: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
        }
        for r in self.records.values() {
            for v in &r.vector {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read_binary<R: Read>(mut r: R, metric: Similarity) -> Result<Self> {
        fn u64_le<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let d = u64_le(&mut r)? as usize;
        let count = u64_le(&mut r)? as usize;
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let mut lb = [0u8; 4];
            r.read_exact(&mut lb)?;
            let mut buf = vec![0u8; u32::from_le_bytes(lb) as usize];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|e| Error::InvalidInput(format!("bad id bytes: {e}")))?);
        }
        let mut index = Self::new(d, metric)?;
        for id in ids {
            let mut vector = Vec::with_capacity(d);
            for _ in 0..d {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                vector.push(f64::from_le_bytes(b));
            }
            index.records.insert(id.clone(), EmbeddingRecord::new(id, vector));
        }
        Ok(index)
    }

    fn sidecar_path(path: &Path) -> std::path::PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        p.into()
    }

    /// Writes `path` (vectors) and `path.json` (metric and metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf)?;
        crate::io::write_atomic(path, &buf)?;
        let sidecar = Sidecar {
            format_version: FORMAT_VERSION,
            dimension: self.dimension,
            metric: self.metric,
            metadata: self
                .records
                .values()
                .filter(|r| !r.metadata.is_empty())
                .map(|r| (r.id.clone(), r.metadata.clone()))
                .collect(),
            timestamps: self
                .records
                .values()
                .filter_map(|r| r.timestamp.map(|t| (r.id.clone(), t)))
                .collect(),
        };
        crate::io::write_atomic(&Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(path))?)?;
        if sidecar.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: sidecar.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let bytes = std::fs::read(path)?;
        let mut index = Self::read_binary(bytes.as_slice(), sidecar.metric)?;
        if index.dimension != sidecar.dimension {
            return Err(Error::Shape(format!(
                "vector file has dimension {}, sidecar says {}",
                index.dimension, sidecar.dimension
            )));
        }
        for (id, meta) in sidecar.metadata {
            if let Some(r) = index.records.get_mut(&id) {
                r.metadata = meta;
            }
        }
        for (id, t) in sidecar.timestamps {
            if let Some(r) = index.records.get_mut(&id) {
                r.timestamp = Some(t);
            }
        }
        Ok(index)
    }
}

/// One embedding per matrix row, keyed by the row id and dated by its period.
pub fn embeddings_from_matrix(x: &FeatureMatrix) -> Vec<EmbeddingRecord> {
    x.rows()
        .zip(&x.row_keys)
        .map(|(row, key)| {
            let mut metadata = BTreeMap::new();
            metadata.insert("firm_id".to_string(), key.firm_id.clone());
            metadata.insert("agency".to_string(), key.agency.slug().to_string());
            EmbeddingRecord {
                id: key.id(),
                vector: row.to_vec(),
                metadata,
                timestamp: Some(key.period),
            }
        })
        .collect()
}

/// Query projection `W_q`, stored as `d` rows of length `d_h` so that
/// `W_q h` lives in the embedding space of the retrieved vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub projection: Vec<Vec<f64>>,
}

impl FusionConfig {
    pub fn new(projection: Vec<Vec<f64>>) -> Result<Self> {
        let d_h = projection.first().map_or(0, Vec::len);
        if projection.is_empty() || d_h == 0 || projection.iter().any(|r| r.len() != d_h) {
            return Err(Error::Shape("projection must be a non-empty rectangular matrix".into()));
        }
        if projection.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("projection has non-finite entries".into()));
        }
        Ok(Self { projection })
    }

    /// `W_q = I` for `d_h = d`.
    pub fn identity(d: usize) -> Self {
        Self {
            projection: (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

/// Numerically stable softmax (the max logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Attention weights from precomputed logits, applied to the rows of `v`.
pub fn fuse_logits(logits: &[f64], v: &[Vec<f64>]) -> Result<Fusion> {
    if v.is_empty() || logits.len() != v.len() {
        return Err(Error::Shape(format!("{} logits for {} context rows", logits.len(), v.len())));
    }
    let d = v[0].len();
    if v.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("context rows differ in length".into()));
    }
    let weights = softmax(logits);
    let output = (0..d)
        .map(|j| {
            if v.len() == 1 {
                v[0][j]
            } else {
                weights.iter().zip(v).map(|(w, r)| w * r[j]).sum()
            }
        })
        .collect();
    Ok(Fusion {
        logits: logits.to_vec(),
        weights,
        output,
    })
}

/// `h' = softmax((W_q h) · Vᵀ) V`.
pub fn fuse(h: &[f64], v: &[Vec<f64>], cfg: &FusionConfig) -> Result<Fusion> {
    if h.len() != cfg.hidden_dim() {
        return Err(Error::Shape(format!(
            "hidden vector has length {}, projection expects {}",
            h.len(),
            cfg.hidden_dim()
        )));
    }
    if v.iter().any(|r| r.len() != cfg.embedding_dim()) {
        return Err(Error::Shape(format!(
            "context rows must have length {}",
            cfg.embedding_dim()
        )));
    }
    let q: Vec<f64> = cfg.projection.iter().map(|row| dot(row, h)).collect();
    let logits: Vec<f64> = v.iter().map(|r| dot(&q, r)).collect();
    fuse_logits(&logits, v)
}
