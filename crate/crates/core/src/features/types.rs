use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial patch-token grid for one layer, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * dim {
            return Err(Error::Shape(format!(
                "patch grid ({h}, {w}, {dim}) needs {} values, got {}",
                h * w * dim,
                data.len()
            )));
        }
        Ok(Self { h, w, dim, data })
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.w + j) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Binary ground-truth mask at image resolution; values are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask ({h}, {w}) needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Shared dimensions of every record in a feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_cls: usize,
    pub d_patch: usize,
    pub h: usize,
    pub w: usize,
}

/// One image's extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub class_name: String,
    pub label: u8,
    pub mask: Option<Mask>,
    pub class_embed: Vec<f32>,
    pub patch_grids: BTreeMap<u32, PatchGrid>,
    pub image_dims: (usize, usize),
}

impl FeatureRecord {
    pub fn is_normal(&self) -> bool {
        self.label == 0
    }

    pub fn grid(&self, layer: u32) -> Result<&PatchGrid> {
        self.patch_grids
            .get(&layer)
            .ok_or_else(|| Error::Argument(format!("record `{}` has no layer {layer}", self.id)))
    }

    pub fn layers(&self) -> Vec<u32> {
        self.patch_grids.keys().copied().collect()
    }

    /// Grid shape `(h, w, d_patch)` shared by all layers, if any.
    pub fn grid_shape(&self) -> Option<(usize, usize, usize)> {
        self.patch_grids.values().next().map(|g| (g.h, g.w, g.dim))
    }

    /// Mask if present, otherwise an all-zero mask at image resolution.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Mask::zeros(self.image_dims.0, self.image_dims.1))
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Validation {
            record: self.id.clone(),
            reason: reason.into(),
        }
    }

    /// Checks every record-level invariant against the owning set's layout.
    pub fn validate(&self, dims: &FeatureDims, layers: &[u32]) -> Result<()> {
        if self.label > 1 {
            return Err(self.invalid(format!("label {} is not 0 or 1", self.label)));
        }
        let (h_img, w_img) = self.image_dims;
        if h_img == 0 || w_img == 0 {
            return Err(self.invalid("image dims must be positive"));
        }
        if let Some(mask) = &self.mask {
            if (mask.h, mask.w) != (h_img, w_img) || mask.data.len() != h_img * w_img {
                return Err(self.invalid(format!(
                    "mask shape ({}, {}) does not match image dims ({h_img}, {w_img})",
                    mask.h, mask.w
                )));
            }
            if mask.data.iter().any(|&v| v > 1) {
                return Err(self.invalid("mask values must be 0 or 1"));
            }
        }
        if self.class_embed.len() != dims.d_cls {
            return Err(self.invalid(format!(
                "class embedding has {} values, expected {}",
                self.class_embed.len(),
                dims.d_cls
            )));
        }
        if !self.class_embed.iter().all(|v| v.is_finite()) {
            return Err(self.invalid("class embedding contains a non-finite value"));
        }
        let keys: Vec<u32> = self.patch_grids.keys().copied().collect();
        if keys != layers {
            return Err(self.invalid(format!("layer keys {keys:?} differ from layer set {layers:?}")));
        }
        for (layer, grid) in &self.patch_grids {
            if (grid.h, grid.w, grid.dim) != (dims.h, dims.w, dims.d_patch)
                || grid.data.len() != dims.h * dims.w * dims.d_patch
            {
                return Err(self.invalid(format!(
                    "layer {layer} grid ({}, {}, {}) does not match ({}, {}, {})",
                    grid.h, grid.w, grid.dim, dims.h, dims.w, dims.d_patch
                )));
            }
            if !grid.data.iter().all(|v| v.is_finite()) {
                return Err(self.invalid(format!("layer {layer} contains a non-finite value")));
            }
        }
        Ok(())
    }
}

/// An ordered, validated collection of records sharing one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    records: Vec<FeatureRecord>,
    layer_set: Vec<u32>,
    dims: FeatureDims,
}

impl FeatureSet {
    pub fn new(records: Vec<FeatureRecord>, mut layer_set: Vec<u32>, dims: FeatureDims) -> Result<Self> {
        layer_set.sort_unstable();
        if layer_set.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument(format!("duplicate layer index in {layer_set:?}")));
        }
        for r in &records {
            r.validate(&dims, &layer_set)?;
        }
        Ok(Self {
            records,
            layer_set,
            dims,
        })
    }

    /// Builds a set whose layout is taken from the first record.
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Argument("cannot infer layout from an empty record list".into()))?;
        let (h, w, d_patch) = first
            .grid_shape()
            .ok_or_else(|| Error::Argument(format!("record `{}` has no patch grids", first.id)))?;
        let dims = FeatureDims {
            d_cls: first.class_embed.len(),
            d_patch,
            h,
            w,
        };
        let layers = first.layers();
        Self::new(records, layers, dims)
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }

    pub fn layer_set(&self) -> &[u32] {
        &self.layer_set
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn normals(&self) -> impl Iterator<Item = &FeatureRecord> {
        self.records.iter().filter(|r| r.is_normal())
    }

    /// Distinct class names in first-appearance order.
    pub fn class_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.class_name) {
                out.push(r.class_name.clone());
            }
        }
        out
    }
}

/// The K-shot normal reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    prompts: Vec<FeatureRecord>,
}

impl PromptBank {
    pub fn new(prompts: Vec<FeatureRecord>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Argument("prompt bank needs at least one prompt".into()));
        }
        if let Some(bad) = prompts.iter().find(|p| !p.is_normal()) {
            return Err(Error::Contract(format!("prompt `{}` is not a normal record", bad.id)));
        }
        let first = &prompts[0];
        let shape = first.grid_shape();
        let layers = first.layers();
        for p in &prompts[1..] {
            if p.class_embed.len() != first.class_embed.len() || p.grid_shape() != shape || p.layers() != layers {
                return Err(Error::Shape(format!(
                    "prompt `{}` layout differs from prompt `{}`",
                    p.id, first.id
                )));
            }
        }
        Ok(Self { prompts })
    }

    pub fn prompts(&self) -> &[FeatureRecord] {
        &self.prompts
    }

    pub fn k(&self) -> usize {
        self.prompts.len()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.id.as_str()).collect()
    }
}

/// Averaged normal and abnormal text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypes {
    f_normal: Vec<f32>,
    f_abnormal: Vec<f32>,
}

impl TextPrototypes {
    pub fn new(f_normal: Vec<f32>, f_abnormal: Vec<f32>) -> Result<Self> {
        if f_normal.len() != f_abnormal.len() || f_normal.is_empty() {
            return Err(Error::Shape(format!(
                "prototype dims {} and {} must match and be positive",
                f_normal.len(),
                f_abnormal.len()
            )));
        }
        for (name, v) in [("normal", &f_normal), ("abnormal", &f_abnormal)] {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Argument(format!("{name} prototype is not finite")));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::Argument(format!("{name} prototype has zero norm")));
            }
        }
        Ok(Self { f_normal, f_abnormal })
    }

    /// Averages raw prompt embeddings into prototypes.
    pub fn from_embeddings(normal: &[Vec<f32>], abnormal: &[Vec<f32>]) -> Result<Self> {
        fn mean(set: &[Vec<f32>], which: &str) -> Result<Vec<f32>> {
            let first = set
                .first()
                .ok_or_else(|| Error::Argument(format!("empty {which} prompt set")))?;
            let mut acc = vec![0.0f64; first.len()];
            for v in set {
                if v.len() != acc.len() {
                    return Err(Error::Shape(format!("{which} prompt embeddings differ in length")));
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += f64::from(*x);
                }
            }
            Ok(acc.iter().map(|a| (a / set.len() as f64) as f32).collect())
        }
        Self::new(mean(normal, "normal")?, mean(abnormal, "abnormal")?)
    }

    pub fn normal(&self) -> &[f32] {
        &self.f_normal
    }

    pub fn abnormal(&self) -> &[f32] {
        &self.f_abnormal
    }

    pub fn d_text(&self) -> usize {
        self.f_normal.len()
    }

    /// Same prototypes with the normal and abnormal roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            f_normal: self.f_abnormal.clone(),
            f_abnormal: self.f_normal.clone(),
        }
    }
}
