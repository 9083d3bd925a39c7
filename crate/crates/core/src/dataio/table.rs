use std::path::Path;

use super::{write_atomic, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{DataMatrix, DenseMatrix};

/// Which CSV column holds the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// Dense CSV with a header row; one sample per row, every non-label column
/// a feature.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyInput {
            path: path.to_path_buf(),
        });
    }
    let label_at = match label {
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fail(1, format!("no column named {name:?}")))?,
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => {
            return Err(fail(1, format!("label column {i} but only {} columns", headers.len())))
        }
    };
    let dim = headers.len() - 1;

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() != headers.len() {
            return Err(fail(line, format!("{} fields, header has {}", record.len(), headers.len())));
        }
        for (c, field) in record.iter().enumerate() {
            if c == label_at {
                let v: i64 = field
                    .parse()
                    .map_err(|_| fail(line, format!("bad label {field:?}")))?;
                labels.push(v);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| fail(line, format!("bad value {field:?}")))?;
                if !v.is_finite() {
                    return Err(fail(line, format!("non-finite value {v}")));
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput {
            path: path.to_path_buf(),
        });
    }
    Ok(LabeledDataset {
        x: DataMatrix::Dense(DenseMatrix::from_vec(dim, labels.len(), values)),
        labels,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Header `label,f0,f1,...`, one row per sample.
pub fn write_csv(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let dense = ds.x.to_dense();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..dense.nrows()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (j, col) in dense.column_iter().enumerate() {
        let mut row = vec![ds.labels[j].to_string()];
        row.extend(col.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn parses_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,label,b\n0.5,1,2\n-1,0,3.25\n").unwrap();
        let ds = load_csv(&path, &LabelColumn::Name("label".into())).unwrap();
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.x.to_dense(), DenseMatrix::from_column_slice(2, 2, &[0.5, 2.0, -1.0, 3.25]));
        let same = load_csv(&path, &LabelColumn::Index(1)).unwrap();
        assert_eq!(same, ds);
    }

    #[test]
    fn missing_label_column_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        let err = load_csv(&path, &LabelColumn::Name("label".into())).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        fs::write(&path, "label,a\n1,NaN\n").unwrap();
        let err = load_csv(&path, &LabelColumn::Index(0)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        fs::write(&path, "label,a\n").unwrap();
        assert!(matches!(
            load_csv(&path, &LabelColumn::Index(0)),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let ds = LabeledDataset {
            x: DataMatrix::Dense(DenseMatrix::from_fn(3, 4, |i, j| (i as f64 - 1.3) / (j as f64 + 0.7))),
            labels: vec![4, 4, -1, 0],
        };
        write_csv(&path, &ds).unwrap();
        assert_eq!(load_csv(&path, &LabelColumn::Name("label".into())).unwrap(), ds);
    }
}
