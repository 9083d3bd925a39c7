//! Reading and writing datasets, models and run artifacts.

mod libsvm;
mod model;
mod store;
mod table;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::linalg::DataMatrix;

pub use libsvm::{load_libsvm, write_libsvm};
pub use model::{load_model, save_model, write_embedding, write_trace, ModelMetadata, MODEL_MAGIC};
pub use store::{ColumnStore, ColumnStoreWriter};
pub use table::{load_csv, write_csv, LabelColumn};

/// Samples as columns of `x`, with one integer class id each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: DataMatrix,
    pub labels: Vec<i64>,
}

impl LabeledDataset {
    pub fn feature_count(&self) -> usize {
        self.x.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.x.ncols()
    }
}

/// Scales every nonzero column to unit length. Returns the number of zero
/// columns, which are left as they are.
pub fn normalize_columns(ds: &mut LabeledDataset) -> usize {
    let mut zero = 0;
    for j in 0..ds.x.ncols() {
        let norm = ds.x.column_norm(j);
        if norm > 0.0 {
            ds.x.scale_column(j, 1.0 / norm);
        } else {
            zero += 1;
        }
    }
    if zero > 0 {
        log::warn!("{zero} zero columns left unnormalized");
    }
    zero
}

/// Loads by extension: `.csv` as a table with a `label` column, `.fcs` as a
/// column store, anything else as LIBSVM text.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path, &LabelColumn::Name("label".into())),
        Some("fcs") => ColumnStore::open(path)?.load_all(),
        _ => load_libsvm(path, None),
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a truncated file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = sibling(path, ".tmp");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}
