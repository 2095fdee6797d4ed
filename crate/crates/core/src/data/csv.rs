//! Delimited-text ingestion: a header row, one row per time step.

use crate::error::{Error, Result};
use std::path::Path;

/// Raw numeric table in file order.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Load the named feature columns from a delimited file. Pass an empty slice
/// to take every column.
pub fn load_csv(path: &Path, feature_columns: &[String], delimiter: u8) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ::csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_reader(file);

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let wanted: Vec<String> = if feature_columns.is_empty() {
        headers.clone()
    } else {
        feature_columns.to_vec()
    };
    let mut indices = Vec::with_capacity(wanted.len());
    for name in &wanted {
        match headers.iter().position(|h| h == name) {
            Some(i) => indices.push(i),
            None => return Err(Error::MissingColumn(name.clone())),
        }
    }

    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Data(format!("row {}: {e}", row_idx + 1)))?;
        let mut row = Vec::with_capacity(indices.len());
        for (&col, name) in indices.iter().zip(&wanted) {
            let cell = record.get(col).unwrap_or("");
            let parsed: f64 = cell.parse().map_err(|_| Error::BadCell {
                row: row_idx + 1,
                column: name.clone(),
                cell: cell.to_string(),
            })?;
            row.push(parsed);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(RawTable { columns: wanted, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_selected_columns_in_order() {
        let f = write_tmp("a,b,c\n1,2,3\n4,5,6\n");
        let t = load_csv(f.path(), &["c".into(), "a".into()], b',').unwrap();
        assert_eq!(t.columns, vec!["c", "a"]);
        assert_eq!(t.rows, vec![vec![3.0, 1.0], vec![6.0, 4.0]]);
    }

    #[test]
    fn six_feature_file_keeps_six_columns() {
        let f = write_tmp("Open,High,Low,Close,Adj Close,Volume\n1,2,3,4,5,6\n7,8,9,10,11,12\n");
        let t = load_csv(f.path(), &[], b',').unwrap();
        assert_eq!(t.columns.len(), 6);
    }

    #[test]
    fn distinct_errors() {
        let missing = load_csv(Path::new("/nonexistent/file.csv"), &[], b',');
        assert!(matches!(missing, Err(Error::Io { .. })));

        let f = write_tmp("a,b\n1,2\n");
        let err = load_csv(f.path(), &["zzz".into()], b',').unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "zzz"));

        let f = write_tmp("a,b\n1,oops\n");
        let err = load_csv(f.path(), &[], b',').unwrap_err();
        match err {
            Error::BadCell { row, ref column, ref cell } => {
                assert_eq!((row, column.as_str(), cell.as_str()), (1, "b", "oops"));
            }
            other => panic!("expected BadCell, got {other:?}"),
        }

        let f = write_tmp("");
        assert!(load_csv(f.path(), &[], b',').is_err());

        let f = write_tmp("a,b\n");
        let err = load_csv(f.path(), &[], b',').unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }
}
