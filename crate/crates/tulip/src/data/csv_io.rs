//! CSV import/export. Import maps arbitrary label strings to class
//! ids in first-appearance order; export writes x0..x{d-1}, label,
//! split, ood with full float round-trip precision.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{Dataset, Split, NO_LABEL};

pub(crate) fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(["label".into(), "split".into(), "ood".into()]);
    writer
        .write_record(&header)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds
            .features()
            .row(i)
            .iter()
            // Shortest representation that parses back to the same
            // f64, so export -> import is lossless.
            .map(|v| format!("{v}"))
            .collect();
        record.push(ds.raw_labels()[i].to_string());
        record.push(ds.split_of(i).as_str().to_string());
        record.push(ds.ood_flag(i).to_string());
        writer
            .write_record(&record)
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

/// Loads a header-ed CSV as a dataset: the named column carries the
/// labels (mapped to 0..K-1 in first-appearance order), every other
/// column must be numeric, and all rows start in the train split.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Schema("file has no header row".into()),
            _ => Error::Schema(format!("unreadable header: {e}")),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Schema("file has no header row".into()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Schema(format!(
                "label column {label_column:?} not found; file has columns {:?}",
                headers.iter().collect::<Vec<_>>()
            ))
        })?;
    let feature_cols: Vec<usize> =
        (0..headers.len()).filter(|&c| c != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema(
            "file has a label column but no feature columns".into(),
        ));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut label_map: HashMap<String, usize> = HashMap::new();
    // Rows are 1-based and count the header as row 0, matching what a
    // text editor shows minus nothing: first data row = row 1.
    for (data_idx, record) in reader.records().enumerate() {
        let row_no = data_idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            column: 0,
            message: format!("malformed record: {e}"),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: row_no,
                column: 0,
                message: format!(
                    "expected {} fields, found {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: row_no,
                column: c + 1,
                message: format!("non-numeric cell {cell:?} in column {:?}", &headers[c]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    column: c + 1,
                    message: format!("non-finite cell {cell:?} in column {:?}", &headers[c]),
                });
            }
            features.push(value);
        }
        let label_text = record.get(label_idx).unwrap_or("").trim().to_string();
        let next_id = label_map.len();
        let id = *label_map.entry(label_text).or_insert(next_id);
        labels.push(id);
        rows.push(features);
    }
    if rows.is_empty() {
        return Err(Error::Schema("file contains no data rows".into()));
    }
    let d = feature_cols.len();
    let mut features = Array2::<f64>::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    Dataset::new(features, labels)
}

/// Reads back a dataset written by [`Dataset::save_csv`], restoring
/// splits, masked labels, and OOD flags exactly.
pub fn load_export_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let d = cols
        .iter()
        .take_while(|h| h.starts_with('x'))
        .count();
    if d == 0 || cols.len() != d + 3 || cols[d] != "label" || cols[d + 1] != "split" || cols[d + 2] != "ood" {
        return Err(Error::Schema(format!(
            "not a dataset export (columns {cols:?}); expected x0..x{{d-1}}, label, split, ood"
        )));
    }
    let mut features_rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut splits: Vec<Split> = Vec::new();
    let mut ood: Vec<bool> = Vec::new();
    for (data_idx, record) in reader.records().enumerate() {
        let row_no = data_idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            column: 0,
            message: format!("malformed record: {e}"),
        })?;
        let mut row = Vec::with_capacity(d);
        for c in 0..d {
            let cell = record.get(c).unwrap_or("");
            row.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                row: row_no,
                column: c + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?);
        }
        features_rows.push(row);
        labels.push(record.get(d).unwrap_or("").parse().map_err(|_| Error::Parse {
            row: row_no,
            column: d + 1,
            message: "bad label".into(),
        })?);
        splits.push(match record.get(d + 1) {
            Some("train") => Split::Train,
            Some("validation") => Split::Validation,
            Some("test") => Split::Test,
            other => {
                return Err(Error::Parse {
                    row: row_no,
                    column: d + 2,
                    message: format!("unknown split {other:?}"),
                })
            }
        });
        ood.push(match record.get(d + 2) {
            Some("true") => true,
            Some("false") => false,
            other => {
                return Err(Error::Parse {
                    row: row_no,
                    column: d + 3,
                    message: format!("bad ood flag {other:?}"),
                })
            }
        });
    }
    if features_rows.is_empty() {
        return Err(Error::Schema("file contains no data rows".into()));
    }
    let n_classes = labels
        .iter()
        .filter(|&&l| l != NO_LABEL)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let mut features = Array2::<f64>::zeros((features_rows.len(), d));
    for (i, row) in features_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    Ok(Dataset::from_parts(features, labels, splits, ood, n_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_spiral, split_test, split_validation};
    use std::io::Write as _;

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn first_appearance_label_mapping() {
        let f = write_file("f0,f1,kind\n1.0,2.0,a\n3.0,4.0,b\n5.0,6.0,a\n");
        let ds = load_csv(f.path(), "kind").unwrap();
        assert_eq!(ds.raw_labels(), &[0, 1, 0]);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.dim(), 2);
        assert!(ds.splits().iter().all(|&s| s == Split::Train));
        assert_eq!(ds.features()[[2, 1]], 6.0);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_csv(Path::new("/nonexistent/nowhere.csv"), "y").unwrap_err();
        assert!(matches!(err, Error::Io(_)), "got {err:?}");
    }

    #[test]
    fn missing_label_column_is_schema_error() {
        let f = write_file("f0,f1\n1.0,2.0\n");
        let err = load_csv(f.path(), "kind").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
    }

    #[test]
    fn empty_file_is_schema_error() {
        let f = write_file("");
        let err = load_csv(f.path(), "kind").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
        // Header-only files also carry no data.
        let f = write_file("f0,kind\n");
        let err = load_csv(f.path(), "kind").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let f = write_file("f0,f1,kind\n1.0,2.0,a\n1.0,oops,b\n");
        let err = load_csv(f.path(), "kind").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn nan_cell_reports_row_and_column() {
        let f = write_file("f0,f1,kind\n1.0,NaN,a\n");
        let err = load_csv(f.path(), "kind").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_column_position_is_flexible() {
        let f = write_file("kind,f0\nup,0.25\ndown,0.5\n");
        let ds = load_csv(f.path(), "kind").unwrap();
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.raw_labels(), &[0, 1]);
        assert_eq!(ds.features()[[1, 0]], 0.5);
    }

    #[test]
    fn export_import_round_trip_is_exact() {
        let ds = gen_spiral(30, 3, 1.0, 0.05, 42).unwrap();
        let ds = split_test(&ds, 0.3, 1).unwrap();
        let mut ds = split_validation(&ds, 0.1, 2).unwrap();
        ds.scrub_validation_labels();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.csv");
        ds.save_csv(&path).unwrap();
        let back = load_export_csv(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&ds).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }
}
