use std::path::Path;

use super::SeriesDataset;
use crate::error::{Error, Result};

const TIMESTAMP_NAMES: [&str; 4] = ["date", "time", "timestamp", "datetime"];

/// Reads a rectangular numeric CSV with a header row.
///
/// `timestamp_column` names a column to drop. Without it, a first column
/// called `date`, `time`, `timestamp` or `datetime` is dropped.
pub fn load_csv(path: &Path, timestamp_column: Option<&str>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_error(path, 1, 0, format!("{other:?}")),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, 1, 0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();

    let skip = match timestamp_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_error(path, 1, 0, format!("no column named '{name}'")))?,
        ),
        None => headers
            .first()
            .filter(|h| TIMESTAMP_NAMES.contains(&h.to_ascii_lowercase().as_str()))
            .map(|_| 0),
    };
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, h)| h.clone())
        .collect();
    if columns.is_empty() {
        return Err(parse_error(path, 1, 0, "no value columns".into()));
    }

    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = r + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, expected_len, .. } => parse_error(
                path,
                line,
                *len as usize,
                format!("ragged row: {len} fields, expected {expected_len}"),
            ),
            _ => parse_error(path, line, 0, e.to_string()),
        })?;
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == skip {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(path, line, c + 1, format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, c + 1, format!("non-finite cell '{cell}'")));
            }
            values.push(v);
        }
    }
    SeriesDataset::new(values, columns)
}

fn parse_error(path: &Path, row: usize, column: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    }
}
