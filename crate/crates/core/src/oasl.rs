//! One-class anomaly score learning: the same semantic alignment as the
//! discriminative branch, evaluated with its own independently trained
//! adapter and fitted on normal records only.

use crate::dasl::{average_with_residual, semantic_maps, Branch, PatchTextAdapter, SemanticMaps};
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, TextPrototypes};
use crate::residual::ResidualMap;
use crate::tensor::Grid;

pub(crate) fn require_oasl(phi: &PatchTextAdapter) -> Result<()> {
    if phi.branch != Branch::Oasl {
        return Err(Error::Config(format!(
            "expected a one-class adapter, got {:?}",
            phi.branch
        )));
    }
    Ok(())
}

/// Semantic maps under the one-class adapter.
pub fn oasl_maps(
    query: &FeatureRecord,
    protos: &TextPrototypes,
    phi2: &PatchTextAdapter,
    layers: &[u32],
    tau: f64,
) -> Result<SemanticMaps> {
    require_oasl(phi2)?;
    semantic_maps(query, protos, phi2, layers, tau)
}

/// Element-wise mean of the rescaled residual map and the one-class abnormal map.
pub fn oasl_pixel_map(residual_map: &ResidualMap, maps: &SemanticMaps) -> Result<Grid> {
    average_with_residual(residual_map, &maps.abnormal)
}
