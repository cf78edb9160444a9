//! Line-delimited JSON with line-accurate diagnostics. serde_json's float
//! formatting is shortest-round-trip, so every written number reparses to
//! the identical f64 and reruns produce byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Malformed {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read a whole JSONL file; empty lines are skipped, the first malformed
/// line aborts with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, item)| item).collect())
}

/// Like [`read_jsonl`], also reporting each record's 1-based line number so
/// callers can attach semantic validation errors to the right line.
pub fn read_jsonl_numbered<T: DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>, JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| JsonlError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
        items.push((idx + 1, item));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        name: String,
        value: f64,
    }

    #[test]
    fn round_trip_and_line_numbered_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            Row { name: "a".into(), value: 0.1 + 0.2 },
            Row { name: "b".into(), value: -1.5e-9 },
        ];
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);

        std::fs::write(&path, "{\"name\":\"a\",\"value\":1}\nnot json\n").unwrap();
        let err = read_jsonl::<Row>(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
