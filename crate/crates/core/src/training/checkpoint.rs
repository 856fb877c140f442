//! Checkpoint file: magic "GADSCP01", u32 version, u32 d_cls, d_patch,
//! d_text, then every adapter tensor as little-endian f64 in
//! [`TENSOR_NAMES`](super::params::TENSOR_NAMES) order.

use std::path::Path;

use super::params::AdapterParams;
use crate::dasl::{Branch, PatchTextAdapter};
use crate::error::{Error, Result};
use crate::residual::{ImageAdapter, ResidualHead};
use crate::tensor::Affine;

pub const MAGIC: &[u8; 8] = b"GADSCP01";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

fn tensor_count(d_cls: usize, d_patch: usize, d_text: usize) -> usize {
    d_cls * d_cls + d_cls + d_cls + 1 + 2 * (d_text * d_patch + d_text)
}

pub fn encode_checkpoint(params: &AdapterParams) -> Result<Vec<u8>> {
    params.validate()?;
    let (d_cls, d_patch, d_text) = params.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * tensor_count(d_cls, d_patch, d_text));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, d_cls as u32, d_patch as u32, d_text as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (_, t) in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AdapterParams> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a GADSCP01 checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", word(0))));
    }
    let (d_cls, d_patch, d_text) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if d_cls == 0 || d_patch == 0 || d_text == 0 {
        return Err(Error::Corrupt("checkpoint has a zero dimension".into()));
    }
    let expected = HEADER_LEN + 8 * tensor_count(d_cls, d_patch, d_text);
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut params = AdapterParams {
        psi: ImageAdapter(Affine::zeros(d_cls, d_cls)),
        head: ResidualHead::zeros(d_cls),
        phi1: PatchTextAdapter {
            affine: Affine::zeros(d_text, d_patch),
            branch: Branch::Dasl,
        },
        phi2: PatchTextAdapter {
            affine: Affine::zeros(d_text, d_patch),
            branch: Branch::Oasl,
        },
    };
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for slot in t.iter_mut() {
            *slot = values.next().expect("length checked");
        }
    }
    params
        .validate()
        .map_err(|e| Error::Corrupt(format!("checkpoint payload: {e}")))?;
    Ok(params)
}

pub fn write_checkpoint(params: &AdapterParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<AdapterParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = AdapterParams::init(5, 4, 3, 9);
        p.head.bias = -0.125;
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(bytes.len(), 24 + 8 * (25 + 5 + 5 + 1 + 2 * (12 + 3)));
        assert_eq!(&bytes[..8], b"GADSCP01");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&AdapterParams::init(2, 2, 2, 0)).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Corrupt(_))));
    }
}
