//! On-disk column store for streaming mini-batches.
//!
//! Data file: magic `FLRMLcs1`, u64 `D`, u64 `n`, then one record per
//! column: i64 label, u64 nnz, nnz × (u64 row, f64 value). All integers and
//! floats are little-endian. A sibling `.idx` file caches each record's
//! byte offset and label; it is rebuilt by a sequential scan when missing
//! or stale.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{sibling, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{DataMatrix, DenseMatrix, SparseMatrix};
use crate::minibatch::ColumnSource;

const DATA_MAGIC: &[u8; 8] = b"FLRMLcs1";
const INDEX_MAGIC: &[u8; 8] = b"FLRMLix1";
const HEADER_LEN: u64 = 24;

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub struct ColumnStoreWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
    dim: usize,
    offset: u64,
    offsets: Vec<u64>,
    labels: Vec<i64>,
}

impl ColumnStoreWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let tmp = sibling(&path, ".tmp");
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(DATA_MAGIC)?;
        out.write_all(&(dim as u64).to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(ColumnStoreWriter {
            path,
            tmp,
            out,
            dim,
            offset: HEADER_LEN,
            offsets: Vec::new(),
            labels: Vec::new(),
        })
    }

    /// Appends a column given as `(row, value)` pairs with ascending rows.
    pub fn push_sparse(&mut self, label: i64, entries: &[(usize, f64)]) -> Result<()> {
        let mut prev = None;
        for &(i, v) in entries {
            if i >= self.dim || prev.is_some_and(|p| i <= p) {
                return Err(Error::InvalidInput(format!(
                    "column {}: row {i} out of order or range",
                    self.offsets.len()
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("column {}: non-finite value", self.offsets.len())));
            }
            prev = Some(i);
        }
        self.offsets.push(self.offset);
        self.labels.push(label);
        let nnz = entries.iter().filter(|e| e.1 != 0.0).count() as u64;
        self.out.write_all(&label.to_le_bytes())?;
        self.out.write_all(&nnz.to_le_bytes())?;
        for &(i, v) in entries.iter().filter(|e| e.1 != 0.0) {
            self.out.write_all(&(i as u64).to_le_bytes())?;
            self.out.write_all(&v.to_bits().to_le_bytes())?;
        }
        self.offset += 16 + 16 * nnz;
        Ok(())
    }

    pub fn push_dense(&mut self, label: i64, column: &[f64]) -> Result<()> {
        if column.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "column of length {} in a store of dimension {}",
                column.len(),
                self.dim
            )));
        }
        let entries: Vec<(usize, f64)> = column
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        self.push_sparse(label, &entries)
    }

    pub fn finish(mut self) -> Result<ColumnStore> {
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(16))?;
        file.write_all(&(self.offsets.len() as u64).to_le_bytes())?;
        file.sync_all()?;
        drop(file);
        fs::rename(&self.tmp, &self.path)?;
        let store = ColumnStore {
            path: self.path,
            dim: self.dim,
            offsets: self.offsets,
            labels: self.labels,
        };
        store.write_index()?;
        Ok(store)
    }
}

/// Read handle over a column store; every read opens the file afresh, so
/// one handle serves concurrent readers.
#[derive(Debug, Clone)]
pub struct ColumnStore {
    path: PathBuf,
    dim: usize,
    offsets: Vec<u64>,
    labels: Vec<i64>,
}

impl ColumnStore {
    /// Writes every column of `ds` to a new store at `path`.
    pub fn write_dataset(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<ColumnStore> {
        let mut w = ColumnStoreWriter::create(path, ds.feature_count())?;
        for j in 0..ds.sample_count() {
            match &ds.x {
                DataMatrix::Sparse(m) => {
                    let (rows, vals) = m.column(j);
                    let entries: Vec<_> = rows.iter().copied().zip(vals.iter().copied()).collect();
                    w.push_sparse(ds.labels[j], &entries)?;
                }
                DataMatrix::Dense(m) => w.push_dense(ds.labels[j], m.column(j).as_slice())?,
            }
        }
        w.finish()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<ColumnStore> {
        let path = path.as_ref().to_path_buf();
        let mut f = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format(format!("{}: not a column store", path.display())));
        }
        let dim = read_u64(&mut f)? as usize;
        let n = read_u64(&mut f)? as usize;
        drop(f);
        let size = fs::metadata(&path)?.len();
        match Self::read_index(&path, n, size) {
            Some((offsets, labels)) => Ok(ColumnStore {
                path,
                dim,
                offsets,
                labels,
            }),
            None => {
                log::info!("rebuilding column index for {}", path.display());
                let store = Self::scan(path, dim, n, size)?;
                store.write_index()?;
                Ok(store)
            }
        }
    }

    fn index_path(path: &Path) -> PathBuf {
        sibling(path, ".idx")
    }

    fn read_index(path: &Path, n: usize, size: u64) -> Option<(Vec<u64>, Vec<i64>)> {
        let bytes = fs::read(Self::index_path(path)).ok()?;
        if bytes.len() != 16 + 16 * n || &bytes[..8] != INDEX_MAGIC {
            return None;
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        if word(1) as usize != n {
            return None;
        }
        let offsets: Vec<u64> = (0..n).map(|j| word(2 + j)).collect();
        let labels: Vec<i64> = (0..n).map(|j| word(2 + n + j) as i64).collect();
        let ordered = offsets.windows(2).all(|w| w[0] < w[1]);
        let in_range = offsets.first().is_none_or(|&o| o == HEADER_LEN)
            && offsets.last().is_none_or(|&o| o + 16 <= size);
        (ordered && in_range).then_some((offsets, labels))
    }

    fn scan(path: PathBuf, dim: usize, n: usize, size: u64) -> Result<ColumnStore> {
        let mut f = BufReader::new(File::open(&path)?);
        f.seek(SeekFrom::Start(HEADER_LEN))?;
        let mut offsets = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut offset = HEADER_LEN;
        for j in 0..n {
            if offset + 16 > size {
                return Err(Error::Format(format!("{}: column {j} is truncated", path.display())));
            }
            offsets.push(offset);
            labels.push(read_u64(&mut f)? as i64);
            let nnz = read_u64(&mut f)?;
            f.seek_relative((16 * nnz) as i64)?;
            offset += 16 + 16 * nnz;
        }
        if offset != size {
            return Err(Error::Format(format!("{}: trailing bytes after {n} columns", path.display())));
        }
        Ok(ColumnStore {
            path,
            dim,
            offsets,
            labels,
        })
    }

    fn write_index(&self) -> Result<()> {
        let n = self.offsets.len();
        let mut bytes = Vec::with_capacity(16 + 16 * n);
        bytes.extend_from_slice(INDEX_MAGIC);
        bytes.extend_from_slice(&(n as u64).to_le_bytes());
        for o in &self.offsets {
            bytes.extend_from_slice(&o.to_le_bytes());
        }
        for l in &self.labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        super::write_atomic(Self::index_path(&self.path), &bytes)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Streams the record of column `j` into `visit(row, value)`.
    fn visit_column(
        &self,
        f: &mut BufReader<File>,
        j: usize,
        mut visit: impl FnMut(usize, f64),
    ) -> Result<()> {
        let n = self.offsets.len();
        let offset = *self.offsets.get(j).ok_or(Error::IndexOutOfRange { index: j, n })?;
        f.seek(SeekFrom::Start(offset))?;
        let _label = read_u64(f)?;
        let nnz = read_u64(f)?;
        for _ in 0..nnz {
            let row = read_u64(f)? as usize;
            let value = read_f64(f)?;
            if row >= self.dim {
                return Err(Error::Format(format!("column {j}: row {row} out of range")));
            }
            visit(row, value);
        }
        Ok(())
    }

    /// Reads the whole store into memory as a sparse dataset.
    pub fn load_all(&self) -> Result<LabeledDataset> {
        let mut f = BufReader::new(File::open(&self.path)?);
        let mut columns = Vec::with_capacity(self.offsets.len());
        for j in 0..self.offsets.len() {
            let mut col = Vec::new();
            self.visit_column(&mut f, j, |i, v| col.push((i, v)))?;
            columns.push(col);
        }
        Ok(LabeledDataset {
            x: DataMatrix::Sparse(SparseMatrix::from_columns(self.dim, &columns)?),
            labels: self.labels.clone(),
        })
    }
}

impl ColumnSource for ColumnStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.offsets.len()
    }

    fn read_columns(&self, indices: &[usize]) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.dim, indices.len());
        if indices.is_empty() {
            return Ok(out);
        }
        let mut f = BufReader::new(File::open(&self.path)?);
        for (c, &j) in indices.iter().enumerate() {
            let mut col = out.column_mut(c);
            self.visit_column(&mut f, j, |i, v| col[i] = v)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(dim: usize, n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::from_fn(dim, n, |_, _| {
            if rng.random_bool(0.3) {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        LabeledDataset {
            x: DataMatrix::Sparse(SparseMatrix::from_dense(&x)),
            labels: (0..n as i64).map(|i| i % 7 - 3).collect(),
        }
    }

    #[test]
    fn reads_requested_columns_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fcs");
        let ds = dataset(40, 300, 1);
        let store = ColumnStore::write_dataset(&path, &ds).unwrap();
        assert_eq!(store.labels(), ds.labels.as_slice());

        let one = store.read_columns(&[17]).unwrap();
        assert_eq!(one.column(0).into_owned(), ds.x.column(17));
        assert_eq!(store.read_columns(&[]).unwrap().shape(), (40, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let picks: Vec<usize> = (0..100).map(|_| rng.random_range(0..300)).collect();
        assert_eq!(store.read_columns(&picks).unwrap(), ds.x.select_columns(&picks));
        assert!(store.read_columns(&[300]).is_err());
    }

    #[test]
    fn missing_or_stale_index_is_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fcs");
        let ds = dataset(10, 50, 3);
        ColumnStore::write_dataset(&path, &ds).unwrap();
        let idx = ColumnStore::index_path(&path);
        let original = fs::read(&idx).unwrap();

        fs::remove_file(&idx).unwrap();
        let store = ColumnStore::open(&path).unwrap();
        assert_eq!(fs::read(&idx).unwrap(), original);
        assert_eq!(store.load_all().unwrap(), ds);

        fs::write(&idx, b"garbage").unwrap();
        let store = ColumnStore::open(&path).unwrap();
        assert_eq!(store.read_columns(&[49, 0]).unwrap(), ds.x.select_columns(&[49, 0]));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fcs");
        fs::write(&path, b"NOTASTORE_______________").unwrap();
        assert!(matches!(ColumnStore::open(&path), Err(Error::Format(_))));
    }
}
