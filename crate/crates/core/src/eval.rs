//! Applying a model and scoring it.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::TripletSet;
use crate::error::{Error, Result};
use crate::linalg::{matmul_tn, DataMatrix, DenseMatrix};
use crate::trainer::MetricModel;

/// Test columns scored per similarity block.
const TEST_BLOCK: usize = 512;

/// `Y = L X`
pub fn transform(model: &MetricModel, x: &DataMatrix) -> Result<DenseMatrix> {
    if x.nrows() != model.input_dim() {
        return Err(Error::InvalidInput(format!(
            "model expects {} features, data has {}",
            model.input_dim(),
            x.nrows()
        )));
    }
    Ok(x.premul_dense(&model.l))
}

fn unit_columns(y: &DenseMatrix) -> DenseMatrix {
    let mut out = y.clone();
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col.unscale_mut(norm);
        }
    }
    out
}

/// Neighbor list ordered by decreasing similarity, then increasing index.
fn top_k(scores: impl Iterator<Item = f64>, k: usize) -> Vec<(usize, f64)> {
    let before = |a: &(usize, f64), b: &(usize, f64)| -> bool {
        match a.1.partial_cmp(&b.1) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => a.0 < b.0,
        }
    };
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (j, s) in scores.enumerate() {
        let cand = (j, s);
        if best.len() == k && !before(&cand, &best[k - 1]) {
            continue;
        }
        let pos = best.iter().position(|b| before(&cand, b)).unwrap_or(best.len());
        best.insert(pos, cand);
        best.truncate(k);
    }
    best
}

/// Majority label; a tie goes to the tied label met first in neighbor order.
fn vote(neighbors: &[(usize, f64)], labels: &[i64]) -> i64 {
    let mut counts: Vec<(i64, usize)> = Vec::new();
    for &(j, _) in neighbors {
        match counts.iter_mut().find(|(l, _)| *l == labels[j]) {
            Some(entry) => entry.1 += 1,
            None => counts.push((labels[j], 1)),
        }
    }
    let top = counts.iter().map(|c| c.1).max().unwrap_or(0);
    counts.iter().find(|c| c.1 == top).map(|c| c.0).unwrap_or_default()
}

/// k-nearest-neighbor labels under cosine similarity in embedding space.
///
/// A zero test embedding has no direction; it is ranked by the raw inner
/// product instead, which leaves every neighbor tied and picks the lowest
/// indices. Zero training embeddings score 0 against everything.
pub fn knn_classify(
    train_y: &DenseMatrix,
    train_labels: &[i64],
    test_y: &DenseMatrix,
    k: usize,
) -> Result<Vec<i64>> {
    let n = train_y.ncols();
    if train_labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} training labels for {n} training columns",
            train_labels.len()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    if test_y.nrows() != train_y.nrows() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            train_y.nrows(),
            test_y.nrows()
        )));
    }
    let train_unit = unit_columns(train_y);
    let mut predictions = Vec::with_capacity(test_y.ncols());
    for start in (0..test_y.ncols()).step_by(TEST_BLOCK) {
        let width = TEST_BLOCK.min(test_y.ncols() - start);
        let block = unit_columns(&test_y.columns(start, width).into_owned());
        let sims = matmul_tn(&train_unit, &block);
        for c in 0..width {
            let neighbors = top_k(sims.column(c).iter().copied(), k);
            predictions.push(vote(&neighbors, train_labels));
        }
    }
    Ok(predictions)
}

pub fn accuracy(predicted: &[i64], truth: &[i64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

fn cosine(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(&b) / denom
    }
}

/// Fraction of triplets with `cos(y_i, y_j) > cos(y_i, y_k)`; ties fail.
/// An empty set scores 1.
pub fn triplet_satisfaction(y: &DenseMatrix, ts: &TripletSet) -> Result<f64> {
    if ts.is_empty() {
        return Ok(1.0);
    }
    if ts.index_bound() > y.ncols() {
        return Err(Error::IndexOutOfRange {
            index: ts.index_bound() - 1,
            n: y.ncols(),
        });
    }
    let satisfied = ts
        .iter()
        .filter(|t| {
            let anchor = y.column(t.anchor);
            cosine(anchor, y.column(t.positive)) > cosine(anchor, y.column(t.negative))
        })
        .count();
    Ok(satisfied as f64 / ts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub k: usize,
    pub n_test: usize,
    pub triplet_satisfaction: Option<f64>,
    pub wall_seconds: f64,
}

/// Embeds both sets, classifies the test set by k-NN, and optionally scores
/// triplets given over test-set indices.
pub fn evaluate(
    model: &MetricModel,
    train_x: &DataMatrix,
    train_labels: &[i64],
    test_x: &DataMatrix,
    test_labels: &[i64],
    k: usize,
    test_triplets: Option<&TripletSet>,
) -> Result<EvaluationReport> {
    let start = Instant::now();
    if test_labels.len() != test_x.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} test labels for {} test columns",
            test_labels.len(),
            test_x.ncols()
        )));
    }
    let train_y = transform(model, train_x)?;
    let test_y = transform(model, test_x)?;
    let predicted = knn_classify(&train_y, train_labels, &test_y, k)?;
    let triplet_satisfaction = test_triplets
        .map(|ts| triplet_satisfaction(&test_y, ts))
        .transpose()?;
    Ok(EvaluationReport {
        accuracy: accuracy(&predicted, test_labels),
        k,
        n_test: test_labels.len(),
        triplet_satisfaction,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
