//! JSON-lines manifest describing the images an exporter should process.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub class_name: String,
    pub label: u8,
    pub mask_path: Option<String>,
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
        if entry.label > 1 {
            return Err(Error::Format(format!(
                "manifest line {}: label {} is not 0 or 1",
                n + 1,
                entry.label
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).map_err(|e| Error::Format(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
