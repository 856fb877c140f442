//! Binary feature container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GADSFT01" | u32 version=1 | u32 d_cls | u32 d_patch | u32 h | u32 w
//! u32 n_layers | n_layers x u32 layer index | u64 record_count
//! per record:
//!   u16 id_len, id (UTF-8) | u16 class_len, class (UTF-8)
//!   u8 label | u8 has_mask | u32 h_img | u32 w_img
//!   [ceil(h_img*w_img/8) mask bytes, row-major, MSB-first]  if has_mask
//!   d_cls x f32 class embedding
//!   n_layers x (h*w*d_patch) f32, layer-index order, row-major, channel-last
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::types::{FeatureDims, FeatureRecord, FeatureSet, Mask, PatchGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GADSFT01";
pub const VERSION: u32 = 1;

/// Size in bytes of the header for `n_layers` layers.
pub fn header_len(n_layers: usize) -> usize {
    8 + 4 * 6 + 4 * n_layers + 8
}

/// Size in bytes of one encoded record.
pub fn record_len(record: &FeatureRecord, dims: &FeatureDims, n_layers: usize) -> usize {
    let (h_img, w_img) = record.image_dims;
    let mask = if record.mask.is_some() {
        (h_img * w_img).div_ceil(8)
    } else {
        0
    };
    2 + record.id.len()
        + 2
        + record.class_name.len()
        + 1
        + 1
        + 4
        + 4
        + mask
        + 4 * dims.d_cls
        + 4 * n_layers * dims.h * dims.w * dims.d_patch
}

pub fn pack_mask(mask: &Mask) -> Vec<u8> {
    let mut out = vec![0u8; mask.data.len().div_ceil(8)];
    for (idx, &bit) in mask.data.iter().enumerate() {
        if bit != 0 {
            out[idx / 8] |= 0x80 >> (idx % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], h: usize, w: usize) -> Mask {
    let data = (0..h * w).map(|idx| (bytes[idx / 8] >> (7 - idx % 8)) & 1).collect();
    Mask { h, w, data }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} = {v} exceeds u32")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Argument(format!("{what} length {v} exceeds u16")))
}

/// Streams records into the container layout.
///
/// The header's record count is fixed up front; `finish` checks it was honored.
pub struct FeatureWriter<W: Write> {
    out: W,
    dims: FeatureDims,
    layers: Vec<u32>,
    expected: u64,
    written: u64,
}

impl<W: Write> FeatureWriter<W> {
    pub fn new(mut out: W, dims: FeatureDims, layers: &[u32], record_count: u64) -> Result<Self> {
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for (v, what) in [
            (dims.d_cls, "d_cls"),
            (dims.d_patch, "d_patch"),
            (dims.h, "h"),
            (dims.w, "w"),
            (layers.len(), "n_layers"),
        ] {
            out.write_all(&to_u32(v, what)?.to_le_bytes())?;
        }
        for l in &layers {
            out.write_all(&l.to_le_bytes())?;
        }
        out.write_all(&record_count.to_le_bytes())?;
        Ok(Self {
            out,
            dims,
            layers,
            expected: record_count,
            written: 0,
        })
    }

    /// The underlying sink.
    pub fn get_ref(&self) -> &W {
        &self.out
    }

    pub fn write_record(&mut self, record: &FeatureRecord) -> Result<()> {
        if self.written == self.expected {
            return Err(Error::Argument(format!("header declared {} records", self.expected)));
        }
        record.validate(&self.dims, &self.layers)?;
        let out = &mut self.out;
        out.write_all(&to_u16(record.id.len(), "id")?.to_le_bytes())?;
        out.write_all(record.id.as_bytes())?;
        out.write_all(&to_u16(record.class_name.len(), "class name")?.to_le_bytes())?;
        out.write_all(record.class_name.as_bytes())?;
        out.write_all(&[record.label, u8::from(record.mask.is_some())])?;
        out.write_all(&to_u32(record.image_dims.0, "h_img")?.to_le_bytes())?;
        out.write_all(&to_u32(record.image_dims.1, "w_img")?.to_le_bytes())?;
        if let Some(mask) = &record.mask {
            out.write_all(&pack_mask(mask))?;
        }
        write_f32s(out, &record.class_embed)?;
        for grid in record.patch_grids.values() {
            write_f32s(out, &grid.data)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::Argument(format!(
                "wrote {} records but header declared {}",
                self.written, self.expected
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Encodes a whole set into any writer.
pub fn write_features<W: Write>(set: &FeatureSet, out: W) -> Result<W> {
    let mut writer = FeatureWriter::new(out, set.dims(), set.layer_set(), set.len() as u64)?;
    for r in set.records() {
        writer.write_record(r)?;
    }
    writer.finish()
}

/// Writes `set` to `path`. Every record is validated before the file is created.
pub fn write_feature_file(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for r in set.records() {
        r.validate(&set.dims(), set.layer_set())?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(set, BufWriter::new(file)).map_err(|e| match e {
        Error::Stream(source) => Error::io(path, source),
        other => other,
    })?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not valid UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{what} size overflows")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a container held in memory.
pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur
        .take(8, "magic")
        .map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = FeatureDims {
        d_cls: cur.u32("d_cls")? as usize,
        d_patch: cur.u32("d_patch")? as usize,
        h: cur.u32("h")? as usize,
        w: cur.u32("w")? as usize,
    };
    let n_layers = cur.u32("n_layers")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layers.push(cur.u32("layer index")?);
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Corrupt(format!(
            "layer indices {layers:?} are not strictly increasing"
        )));
    }
    let count = cur.u64("record count")?;
    let grid_len = dims
        .h
        .checked_mul(dims.w)
        .and_then(|v| v.checked_mul(dims.d_patch))
        .ok_or_else(|| Error::Corrupt("grid size overflows".into()))?;

    let mut records = Vec::new();
    for n in 0..count {
        let id = cur.string("record id")?;
        let class_name = cur.string("class name")?;
        let label = cur.u8("label")?;
        let has_mask = cur.u8("mask flag")?;
        let h_img = cur.u32("h_img")? as usize;
        let w_img = cur.u32("w_img")? as usize;
        let mask = match has_mask {
            0 => None,
            1 => {
                let n_bytes = h_img
                    .checked_mul(w_img)
                    .ok_or_else(|| Error::Corrupt("mask size overflows".into()))?
                    .div_ceil(8);
                Some(unpack_mask(cur.take(n_bytes, "mask")?, h_img, w_img))
            }
            other => {
                return Err(Error::Corrupt(format!(
                    "record {n} (`{id}`): mask flag {other} is not 0 or 1"
                )))
            }
        };
        let class_embed = cur.f32s(dims.d_cls, "class embedding")?;
        let mut patch_grids = BTreeMap::new();
        for &layer in &layers {
            let data = cur.f32s(grid_len, "patch grid")?;
            patch_grids.insert(
                layer,
                PatchGrid {
                    h: dims.h,
                    w: dims.w,
                    dim: dims.d_patch,
                    data,
                },
            );
        }
        records.push(FeatureRecord {
            id,
            class_name,
            label,
            mask,
            class_embed,
            patch_grids,
            image_dims: (h_img, w_img),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - cur.pos
        )));
    }
    FeatureSet::new(records, layers, dims)
}
