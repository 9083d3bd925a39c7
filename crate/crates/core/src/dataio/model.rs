//! Model files: magic `FLRMLv1\0`, u64 `d`, u64 `D`, `d·D` f64 row-major
//! (all little-endian), then a JSON metadata trailer to end of file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::trainer::{ConvergenceTrace, MetricModel};

pub const MODEL_MAGIC: &[u8; 8] = b"FLRMLv1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub d: usize,
    pub input_dim: usize,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_digest: String,
    pub config: serde_json::Value,
}

impl ModelMetadata {
    pub fn new(model: &MetricModel, config: serde_json::Value) -> Self {
        let digest = Sha256::digest(config.to_string().as_bytes());
        ModelMetadata {
            d: model.rank(),
            input_dim: model.input_dim(),
            config_digest: hex::encode(digest),
            config,
        }
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &MetricModel, meta: &ModelMetadata) -> Result<()> {
    let (d, dim) = model.l.shape();
    let mut bytes = Vec::with_capacity(24 + 8 * d * dim + 256);
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&(d as u64).to_le_bytes());
    bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    for i in 0..d {
        for j in 0..dim {
            bytes.extend_from_slice(&model.l[(i, j)].to_bits().to_le_bytes());
        }
    }
    serde_json::to_writer(&mut bytes, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MetricModel, ModelMetadata)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("not a model file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    let (d, dim) = (word(1) as usize, word(2) as usize);
    let body = d
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(8))
        .filter(|&b| b <= bytes.len() - 24)
        .ok_or_else(|| bad("truncated matrix"))?;
    let mut it = bytes[24..24 + body]
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())));
    let mut l = DenseMatrix::zeros(d, dim);
    for i in 0..d {
        for j in 0..dim {
            l[(i, j)] = it.next().unwrap();
        }
    }
    let meta: ModelMetadata = serde_json::from_slice(&bytes[24 + body..])
        .map_err(|e| bad(&format!("bad metadata: {e}")))?;
    if meta.d != d || meta.input_dim != dim {
        return Err(bad("metadata disagrees with the matrix shape"));
    }
    Ok((MetricModel::new(l)?, meta))
}

/// CSV with header `iter,f,gnorm,tau,seconds`.
pub fn write_trace(path: impl AsRef<Path>, trace: &ConvergenceTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if trace.rows.is_empty() {
        w.write_record(["iter", "f", "gnorm", "tau", "seconds"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for row in &trace.rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// One row per sample: `label,y0,y1,...`.
pub fn write_embedding(path: impl AsRef<Path>, y: &DenseMatrix, labels: &[i64]) -> Result<()> {
    if labels.len() != y.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} embedded samples",
            labels.len(),
            y.ncols()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..y.nrows()).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (j, col) in y.column_iter().enumerate() {
        let mut row = vec![labels[j].to_string()];
        row.extend(col.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}
