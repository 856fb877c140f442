//! In-context residual learning against the few-shot normal prompts.
//!
//! Image level: an affine adapter maps class embeddings, the query's adapted
//! embedding is compared to the mean adapted prompt embedding, and a linear
//! head turns that residual into a score. Patch level: every query patch is
//! matched against every patch of every prompt by cosine similarity, and
//! `1 - best cosine` forms a residual map that is averaged across layers.

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, PatchGrid, PromptBank};
use crate::tensor::{dot, sigmoid, to_f64, Affine, Grid};

/// Square affine adapter over class-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAdapter(pub Affine);

impl ImageAdapter {
    pub fn new(affine: Affine) -> Result<Self> {
        if affine.in_dim != affine.out_dim {
            return Err(Error::Shape(format!(
                "image adapter must be square, got {}x{}",
                affine.out_dim, affine.in_dim
            )));
        }
        if !affine.is_finite() {
            return Err(Error::Argument("image adapter has non-finite entries".into()));
        }
        Ok(Self(affine))
    }

    pub fn identity(dim: usize) -> Self {
        Self(Affine::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.in_dim
    }

    fn apply_checked(&self, embed: &[f32], who: &str) -> Result<Vec<f64>> {
        if embed.len() != self.dim() {
            return Err(Error::Shape(format!(
                "`{who}` class embedding has {} values, adapter expects {}",
                embed.len(),
                self.dim()
            )));
        }
        Ok(self.0.apply_f32(embed))
    }
}

/// Linear scoring head over the image residual, squashed by a logistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ResidualHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, residual: &[f64]) -> Result<f64> {
        if residual.len() != self.weight.len() {
            return Err(Error::Shape(format!(
                "residual has {} values, head expects {}",
                residual.len(),
                self.weight.len()
            )));
        }
        Ok(dot(&self.weight, residual) + self.bias)
    }
}

/// Patch-level residual grid. Raw values lie in `[0, 2]`; after
/// [`ResidualMap::rescaled`] they lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    values: Grid,
    rescaled: bool,
}

impl ResidualMap {
    pub fn raw(values: Grid) -> Self {
        Self {
            values,
            rescaled: false,
        }
    }

    /// Wraps a grid already in `[0, 1]`.
    pub fn from_rescaled(values: Grid) -> Result<Self> {
        if values.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("rescaled residual values must lie in [0, 1]".into()));
        }
        Ok(Self { values, rescaled: true })
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn is_rescaled(&self) -> bool {
        self.rescaled
    }

    /// Halves a raw map into `[0, 1]`; a no-op on already rescaled maps.
    pub fn rescaled(&self) -> ResidualMap {
        if self.rescaled {
            return self.clone();
        }
        ResidualMap {
            values: self.values.scale(0.5),
            rescaled: true,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    pub(crate) fn require_rescaled(&self) -> Result<()> {
        if !self.rescaled {
            return Err(Error::Argument(
                "residual map must be rescaled to [0, 1] before fusion".into(),
            ));
        }
        Ok(())
    }
}

/// Layer-averaged residual map together with its max score.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchResidual {
    pub raw: ResidualMap,
    pub rescaled: ResidualMap,
    /// `max` of the rescaled map.
    pub score: f64,
}

/// Mean adapted class embedding of the prompts.
pub fn image_prototype(bank: &PromptBank, psi: &ImageAdapter) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; psi.dim()];
    for p in bank.prompts() {
        for (a, v) in acc.iter_mut().zip(psi.apply_checked(&p.class_embed, &p.id)?) {
            *a += v;
        }
    }
    let k = bank.k() as f64;
    Ok(acc.into_iter().map(|v| v / k).collect())
}

/// Adapted query embedding minus the prompt prototype.
pub fn image_residual(query: &FeatureRecord, proto: &[f64], psi: &ImageAdapter) -> Result<Vec<f64>> {
    if proto.len() != psi.dim() {
        return Err(Error::Shape(format!(
            "prototype has {} values, adapter expects {}",
            proto.len(),
            psi.dim()
        )));
    }
    let adapted = psi.apply_checked(&query.class_embed, &query.id)?;
    Ok(adapted.iter().zip(proto).map(|(a, p)| a - p).collect())
}

/// Logistic score of the image residual, in `[0, 1]`.
pub fn residual_score(residual: &[f64], head: &ResidualHead) -> Result<f64> {
    Ok(sigmoid(head.logit(residual)?))
}

/// Unit-normalized copy of every cell of a patch grid, as a flat
/// `(h*w) x dim` buffer.
pub(crate) fn normalize_cells(grid: &PatchGrid, record: &str, layer: u32) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.data.len());
    for (idx, cell) in grid.cells().enumerate() {
        let v = to_f64(cell);
        let n = dot(&v, &v).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::ZeroNorm {
                record: record.to_string(),
                layer,
                i: idx / grid.w,
                j: idx % grid.w,
            });
        }
        out.extend(v.iter().map(|x| x / n));
    }
    Ok(out)
}

/// Residual map for one layer: `1 - max cos(query patch, any prompt patch)`.
pub fn patch_residual_map_layer(query: &FeatureRecord, bank: &PromptBank, layer: u32) -> Result<ResidualMap> {
    let q_grid = query.grid(layer)?;
    let dim = q_grid.dim;
    let q = normalize_cells(q_grid, &query.id, layer)?;
    let mut keys = Vec::with_capacity(bank.k() * q.len());
    for p in bank.prompts() {
        let g = p.grid(layer)?;
        if g.dim != dim {
            return Err(Error::Shape(format!(
                "prompt `{}` layer {layer} has patch dim {}, query has {dim}",
                p.id, g.dim
            )));
        }
        keys.extend(normalize_cells(g, &p.id, layer)?);
    }
    let data = q
        .chunks_exact(dim)
        .map(|qc| {
            let best = keys
                .chunks_exact(dim)
                .map(|kc| dot(qc, kc))
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - best).clamp(0.0, 2.0)
        })
        .collect();
    Ok(ResidualMap::raw(Grid::from_vec(q_grid.h, q_grid.w, data)?))
}

/// Layer-averaged residual map and its max score after rescaling.
pub fn patch_residual_map(query: &FeatureRecord, bank: &PromptBank, layers: &[u32]) -> Result<PatchResidual> {
    if layers.is_empty() {
        return Err(Error::Argument("layer set must not be empty".into()));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut acc: Option<Grid> = None;
    for &l in &sorted {
        let m = patch_residual_map_layer(query, bank, l)?;
        acc = Some(match acc {
            None => m.values,
            Some(a) => a.blend(1.0, &m.values, 1.0)?,
        });
    }
    let mean = acc.expect("non-empty layers").scale(1.0 / sorted.len() as f64);
    let raw = ResidualMap::raw(mean);
    let rescaled = raw.rescaled();
    let score = rescaled.max();
    Ok(PatchResidual { raw, rescaled, score })
}
