//! Text-prototype file: magic "GADSTP01", u32 d_text, then F_n and F_a as
//! d_text float32 each, little-endian.

use std::path::Path;

use super::types::TextPrototypes;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GADSTP01";

pub fn encode_prototypes(protos: &TextPrototypes) -> Vec<u8> {
    let d = protos.d_text();
    let mut out = Vec::with_capacity(12 + 8 * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in protos.normal().iter().chain(protos.abnormal()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<TextPrototypes> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a GADSTP01 prototype file".into()));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 8 * d;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "prototype file has {} bytes, expected {expected} for d_text = {d}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (normal, abnormal) = values.split_at(d);
    TextPrototypes::new(normal.to_vec(), abnormal.to_vec())
}

pub fn write_prototypes_file(protos: &TextPrototypes, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_prototypes(protos)).map_err(|e| Error::io(path, e))
}

pub fn read_prototypes_file(path: impl AsRef<Path>) -> Result<TextPrototypes> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_prototypes(&bytes)
}
