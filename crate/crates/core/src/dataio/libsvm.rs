use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{write_atomic, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{DataMatrix, SparseMatrix};

/// Parses `label idx:val idx:val ...` lines (1-based, strictly ascending
/// indices). Blank lines and `#` comments are skipped.
pub fn load_libsvm(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut labels = Vec::new();
    let mut columns: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_ascii_whitespace();
        let label_text = fields.next().unwrap_or_default();
        let label = parse_label(label_text)
            .ok_or_else(|| fail(lineno, format!("bad label {label_text:?}")))?;

        let mut entries = Vec::new();
        let mut prev = 0usize;
        for field in fields {
            let (idx, val) = field
                .split_once(':')
                .ok_or_else(|| fail(lineno, format!("expected idx:val, got {field:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| fail(lineno, format!("bad feature index {idx:?}")))?;
            if idx == 0 {
                return Err(fail(lineno, "feature indices are 1-based".into()));
            }
            if idx <= prev {
                return Err(fail(lineno, format!("index {idx} does not ascend after {prev}")));
            }
            if expected_dim.is_some_and(|d| idx > d) {
                return Err(fail(lineno, format!("index {idx} exceeds dimension {}", expected_dim.unwrap())));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| fail(lineno, format!("bad value {val:?}")))?;
            if !val.is_finite() {
                return Err(fail(lineno, format!("non-finite value {val}")));
            }
            prev = idx;
            entries.push((idx - 1, val));
        }
        max_index = max_index.max(prev);
        labels.push(label);
        columns.push(entries);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput {
            path: path.to_path_buf(),
        });
    }
    let dim = expected_dim.unwrap_or(max_index);
    let x = SparseMatrix::from_columns(dim, &columns)?;
    Ok(LabeledDataset {
        x: DataMatrix::Sparse(x),
        labels,
    })
}

/// Integer labels, also accepting `+1` and integral floats such as `3.0`.
fn parse_label(text: &str) -> Option<i64> {
    if let Ok(v) = text.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = text.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Writes nonzero entries only; values use the shortest exact decimal form.
pub fn write_libsvm(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.sample_count() {
        write!(out, "{}", ds.labels[j]).unwrap();
        match &ds.x {
            DataMatrix::Sparse(m) => {
                let (rows, vals) = m.column(j);
                for (i, v) in rows.iter().zip(vals) {
                    write!(out, " {}:{}", i + 1, v).unwrap();
                }
            }
            DataMatrix::Dense(m) => {
                for (i, v) in m.column(j).iter().enumerate() {
                    if *v != 0.0 {
                        write!(out, " {}:{}", i + 1, v).unwrap();
                    }
                }
            }
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;

    fn write_tmp(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let path = dir.path().join("data.svm");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn parses_a_single_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_libsvm(write_tmp(&dir, "1 1:0.6 3:0.8\n"), None).unwrap();
        assert_eq!(ds.labels, vec![1]);
        assert_eq!(ds.feature_count(), 3);
        assert_eq!(ds.x.to_dense(), DenseMatrix::from_column_slice(3, 1, &[0.6, 0.0, 0.8]));

        let ds = load_libsvm(write_tmp(&dir, "+1 2:1 # note\n\n-1 1:2\n"), Some(5)).unwrap();
        assert_eq!(ds.labels, vec![1, -1]);
        assert_eq!(ds.feature_count(), 5);
    }

    #[test]
    fn empty_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_libsvm(write_tmp(&dir, "# only a comment\n"), None).unwrap_err();
        assert!(matches!(err, Error::EmptyInput { .. }));
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        for (text, line) in [
            ("1 1:1\n2 3:1 2:1\n", 2),
            ("1 0:1\n", 1),
            ("1 1:1\n1 1:x\n", 2),
            ("1 1:1\n\nfoo 1:1\n", 3),
            ("1 1:nan\n", 1),
            ("1 1:inf\n", 1),
            ("1 2\n", 1),
        ] {
            match load_libsvm(write_tmp(&dir, text), None) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(load_libsvm(write_tmp(&dir, "1 4:1\n"), Some(3)).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = DenseMatrix::from_fn(5, 4, |i, j| {
            if (i + j) % 2 == 0 {
                (i as f64 + 0.1) / (j as f64 + 3.0)
            } else {
                0.0
            }
        });
        let ds = LabeledDataset {
            x: DataMatrix::Sparse(SparseMatrix::from_dense(&x)),
            labels: vec![3, -2, 0, 7],
        };
        let path = dir.path().join("rt.svm");
        write_libsvm(&path, &ds).unwrap();
        let back = load_libsvm(&path, Some(5)).unwrap();
        assert_eq!(back, ds);
    }
}
