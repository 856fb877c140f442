//! Test-time scoring: image score and full-resolution anomaly map per query.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dasl::{dasl_pixel_map, fuse_image_score, semantic_maps, semantic_score, SemanticMaps};
use crate::error::{Error, Result};
use crate::features::{
    sample_class_prompts, sample_prompts, BankScope, FeatureRecord, FeatureSet, PromptBank, TextPrototypes,
};
use crate::oasl::{oasl_maps, oasl_pixel_map};
use crate::par;
use crate::residual::{image_prototype, image_residual, patch_residual_map, residual_score, PatchResidual};
use crate::tensor::Grid;
use crate::training::{upsample, AdapterParams, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Empty means every layer of the query.
    pub layers: Vec<u32>,
    pub semantic_score: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for InferenceConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            tau: c.tau,
            layers: c.layers.clone(),
            semantic_score: c.semantic_score,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Final outputs for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyOutput {
    pub id: String,
    pub score: f64,
    /// Anomaly map at image resolution.
    pub map: Grid,
}

/// Every intermediate of a single prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    pub residual_score: f64,
    /// `None` when the semantic image score is disabled.
    pub semantic_score: Option<f64>,
    pub patch: PatchResidual,
    pub dasl: SemanticMaps,
    pub oasl: SemanticMaps,
    pub dasl_map: Grid,
    pub oasl_map: Grid,
    pub score: f64,
    pub map: Grid,
}

impl Prediction {
    pub fn output(&self) -> AnomalyOutput {
        AnomalyOutput {
            id: self.id.clone(),
            score: self.score,
            map: self.map.clone(),
        }
    }
}

/// `(1 - beta) * up(dasl_map) + beta * up(oasl_map)` at `target` resolution.
pub fn fuse_pixel_maps(dasl_map: &Grid, oasl_map: &Grid, beta: f64, target: (usize, usize)) -> Result<Grid> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Argument(format!("beta must lie in [0, 1], got {beta}")));
    }
    dasl_map.ensure_same_shape(oasl_map, "pixel maps")?;
    upsample(dasl_map, target)?.blend(1.0 - beta, &upsample(oasl_map, target)?, beta)
}

pub fn predict(
    record: &FeatureRecord,
    bank: &PromptBank,
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    let layers = if cfg.layers.is_empty() {
        record.layers()
    } else {
        cfg.layers.clone()
    };
    let proto = image_prototype(bank, &params.psi)?;
    let s_i = residual_score(&image_residual(record, &proto, &params.psi)?, &params.head)?;
    let s_q = if cfg.semantic_score {
        Some(semantic_score(&record.class_embed, protos, cfg.tau)?)
    } else {
        None
    };
    let patch = patch_residual_map(record, bank, &layers)?;
    let score = fuse_image_score(s_i, s_q.unwrap_or(s_i), &patch.rescaled, cfg.alpha)?;
    let dasl = semantic_maps(record, protos, &params.phi1, &layers, cfg.tau)?;
    let oasl = oasl_maps(record, protos, &params.phi2, &layers, cfg.tau)?;
    let dasl_map = dasl_pixel_map(&patch.rescaled, &dasl)?;
    let oasl_map = oasl_pixel_map(&patch.rescaled, &oasl)?;
    let map = fuse_pixel_maps(&dasl_map, &oasl_map, cfg.beta, record.image_dims)?;
    Ok(Prediction {
        id: record.id.clone(),
        residual_score: s_i,
        semantic_score: s_q,
        patch,
        dasl,
        oasl,
        dasl_map,
        oasl_map,
        score,
        map,
    })
}

/// Prompt banks for a test run.
#[derive(Debug, Clone)]
pub enum BankSet {
    /// One bank for every query.
    Shared(PromptBank),
    /// One bank per class name.
    PerClass(BTreeMap<String, PromptBank>),
}

impl BankSet {
    /// Seeded sampling of `k` normals from `pool`.
    pub fn sample(pool: &FeatureSet, k: usize, seed: u64, scope: BankScope) -> Result<Self> {
        match scope {
            BankScope::WholeSet => sample_prompts(pool, k, seed).map(BankSet::Shared),
            BankScope::PerClass => {
                let mut banks = BTreeMap::new();
                for class in pool.class_names() {
                    let bank = sample_class_prompts(pool, &class, k, seed)?;
                    banks.insert(class, bank);
                }
                Ok(BankSet::PerClass(banks))
            }
        }
    }

    pub fn for_record(&self, record: &FeatureRecord) -> Result<&PromptBank> {
        match self {
            BankSet::Shared(b) => Ok(b),
            BankSet::PerClass(m) => m.get(&record.class_name).ok_or_else(|| {
                Error::Argument(format!("prompt source has no normals of class `{}`", record.class_name))
            }),
        }
    }
}

/// Scores every record; output order follows `records`.
pub fn predict_set(
    records: &[FeatureRecord],
    banks: &BankSet,
    params: &AdapterParams,
    protos: &TextPrototypes,
    cfg: &InferenceConfig,
) -> Result<Vec<AnomalyOutput>> {
    par::try_map(records, |r| {
        predict(r, banks.for_record(r)?, params, protos, cfg).map(|p| p.output())
    })
}

pub const MAP_MAGIC: &[u8; 8] = b"GADSMP01";

/// Raw map file: magic, u32 count, then per output a u32-length id, f64
/// score, u32 h, u32 w and `h * w` f32 values, little-endian.
pub fn write_map_file(outputs: &[AnomalyOutput], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&(outputs.len() as u32).to_le_bytes());
    for o in outputs {
        buf.extend_from_slice(&(o.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(o.id.as_bytes());
        buf.extend_from_slice(&o.score.to_le_bytes());
        buf.extend_from_slice(&(o.map.h as u32).to_le_bytes());
        buf.extend_from_slice(&(o.map.w as u32).to_le_bytes());
        for &v in &o.map.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_map_file(path: impl AsRef<Path>) -> Result<Vec<AnomalyOutput>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_maps(&bytes)
}

fn decode_maps(bytes: &[u8]) -> Result<Vec<AnomalyOutput>> {
    if bytes.len() < 12 || &bytes[..8] != MAP_MAGIC {
        return Err(Error::Format("not a GADSMP01 map file".into()));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Corrupt("map file is truncated".into()))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Corrupt("map id is not UTF-8".into()))?;
        let score = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let h = u32_at(take(4)?);
        let w = u32_at(take(4)?);
        let data = take(4 * h * w)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(AnomalyOutput {
            id,
            score,
            map: Grid::from_vec(h, w, data)?,
        });
    }
    if take(1).is_ok() {
        return Err(Error::Corrupt("trailing bytes after map records".into()));
    }
    Ok(out)
}
