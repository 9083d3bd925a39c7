use std::collections::BTreeMap;

use super::{DenseMatrix, DenseVector};
use crate::error::{Error, Result};

/// Compressed sparse column matrix.
///
/// Row indices are strictly increasing inside each column and no explicit
/// zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from raw CSC arrays, checking every structural invariant.
    pub fn try_from_csc(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != ncols + 1 || col_ptr[0] != 0 {
            return Err(Error::InvalidInput("column pointer array has wrong shape".into()));
        }
        if row_idx.len() != values.len() || *col_ptr.last().unwrap() != values.len() {
            return Err(Error::InvalidInput("index and value arrays disagree".into()));
        }
        for j in 0..ncols {
            let (lo, hi) = (col_ptr[j], col_ptr[j + 1]);
            if lo > hi {
                return Err(Error::InvalidInput(format!("column {j}: decreasing pointer")));
            }
            let rows = &row_idx[lo..hi];
            if rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidInput(format!(
                    "column {j}: row indices not strictly increasing"
                )));
            }
            if rows.last().is_some_and(|&r| r >= nrows) {
                return Err(Error::InvalidInput(format!("column {j}: row index out of range")));
            }
            if values[lo..hi].iter().any(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!("column {j}: explicit zero stored")));
            }
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Assembles a matrix from `(row, col, value)` entries. Duplicates are
    /// summed; entries that cancel to zero are dropped.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in entries {
            if i >= nrows || j >= ncols {
                return Err(Error::InvalidInput(format!(
                    "entry ({i}, {j}) outside a {nrows}×{ncols} matrix"
                )));
            }
            *acc.entry((j, i)).or_insert(0.0) += v;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(acc.len());
        let mut values = Vec::with_capacity(acc.len());
        for ((j, i), v) in acc {
            if v != 0.0 {
                col_ptr[j + 1] += 1;
                row_idx.push(i);
                values.push(v);
            }
        }
        for j in 0..ncols {
            col_ptr[j + 1] += col_ptr[j];
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Builds a matrix from per-column `(row, value)` lists. Each list must be
    /// sorted by row; zeros are skipped.
    pub fn from_columns(nrows: usize, columns: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for col in columns {
            for &(i, v) in col {
                if v != 0.0 {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(values.len());
        }
        Self::try_from_csc(nrows, columns.len(), col_ptr, row_idx, values)
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut col_ptr = Vec::with_capacity(m.ncols() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for col in m.column_iter() {
            for (i, &v) in col.iter().enumerate() {
                if v != 0.0 {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(values.len());
        }
        SparseMatrix {
            nrows: m.nrows(),
            ncols: m.ncols(),
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row indices and values of column `j`.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.column(j);
        match rows.binary_search(&i) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn column_dense(&self, j: usize) -> DenseVector {
        let mut out = DenseVector::zeros(self.nrows);
        let (rows, vals) = self.column(j);
        for (&i, &v) in rows.iter().zip(vals) {
            out[i] = v;
        }
        out
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        self.column(j).1.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_column(&mut self, j: usize, factor: f64) {
        let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
        for v in &mut self.values[lo..hi] {
            *v *= factor;
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.ncols).map(|j| self.column(j).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn select_columns_dense(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.nrows, indices.len());
        for (c, &j) in indices.iter().enumerate() {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                out[(i, c)] = v;
            }
        }
        out
    }

    /// `self · b`
    pub fn mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.ncols, b.nrows(), "sparse mul_dense: inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.nrows, b.ncols());
        for c in 0..b.ncols() {
            let bc = b.column(c);
            let mut oc = out.column_mut(c);
            for j in 0..self.ncols {
                let w = bc[j];
                if w == 0.0 {
                    continue;
                }
                let (rows, vals) = self.column(j);
                for (&i, &v) in rows.iter().zip(vals) {
                    oc[i] += v * w;
                }
            }
        }
        out
    }

    /// `selfᵀ · b`
    pub fn tr_mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.nrows, b.nrows(), "sparse tr_mul_dense: inner dimensions differ");
        let mut out = DenseMatrix::zeros(self.ncols, b.ncols());
        for c in 0..b.ncols() {
            let bc = b.column(c);
            for j in 0..self.ncols {
                let (rows, vals) = self.column(j);
                out[(j, c)] = rows.iter().zip(vals).map(|(&i, &v)| v * bc[i]).sum();
            }
        }
        out
    }

    /// `a · self`
    pub fn premul_dense(&self, a: &DenseMatrix) -> DenseMatrix {
        assert_eq!(a.ncols(), self.nrows, "sparse premul_dense: inner dimensions differ");
        let mut out = DenseMatrix::zeros(a.nrows(), self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.column(j);
            let mut oc = out.column_mut(j);
            for (&i, &v) in rows.iter().zip(vals) {
                oc.axpy(v, &a.column(i), 1.0);
            }
        }
        out
    }
}
