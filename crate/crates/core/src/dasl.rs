//! Discriminative anomaly score learning: semantic alignment of class and
//! patch embeddings with the normal/abnormal text prototypes, plus the
//! image-score and pixel-map fusion rules.

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, TextPrototypes};
use crate::residual::ResidualMap;
use crate::tensor::{dot, norm, sigmoid, to_f64, Affine, Grid};

/// Which branch an adapter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Dasl,
    Oasl,
}

/// Projection of patch embeddings (`d_patch`) into text space (`d_text`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTextAdapter {
    pub affine: Affine,
    pub branch: Branch,
}

impl PatchTextAdapter {
    pub fn new(affine: Affine, branch: Branch) -> Result<Self> {
        if !affine.is_finite() {
            return Err(Error::Argument("patch adapter has non-finite entries".into()));
        }
        Ok(Self { affine, branch })
    }

    pub fn d_patch(&self) -> usize {
        self.affine.in_dim
    }

    pub fn d_text(&self) -> usize {
        self.affine.out_dim
    }
}

/// Normal- and abnormal-oriented semantic maps; they sum to one per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMaps {
    pub normal: Grid,
    pub abnormal: Grid,
}

/// Unit-normalized prototypes.
pub(crate) struct UnitPrototypes {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl UnitPrototypes {
    pub fn new(protos: &TextPrototypes) -> Result<Self> {
        let unit = |v: &[f32], which: &str| {
            let v = to_f64(v);
            let n = norm(&v);
            if n > 0.0 && n.is_finite() {
                Ok(v.iter().map(|x| x / n).collect())
            } else {
                Err(Error::Normalization(format!("{which} text prototype has zero norm")))
            }
        };
        Ok(Self {
            normal: unit(protos.normal(), "normal")?,
            abnormal: unit(protos.abnormal(), "abnormal")?,
        })
    }

    /// Two-way softmax `(p_abnormal, p_normal)` for a unit vector.
    #[inline]
    fn softmax(&self, unit: &[f64], tau: f64) -> (f64, f64) {
        let t = (dot(unit, &self.abnormal) - dot(unit, &self.normal)) / tau;
        (sigmoid(t), sigmoid(-t))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Probability that the class embedding aligns with the abnormal prototype.
///
/// Requires `d_cls == d_text`; the class token is never projected.
pub fn semantic_score(class_embed: &[f32], protos: &TextPrototypes, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if class_embed.len() != protos.d_text() {
        return Err(Error::Config(format!(
            "semantic score needs d_cls == d_text, got {} and {}",
            class_embed.len(),
            protos.d_text()
        )));
    }
    let units = UnitPrototypes::new(protos)?;
    let g = to_f64(class_embed);
    let n = norm(&g);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Normalization("class embedding has zero norm".into()));
    }
    let g: Vec<f64> = g.iter().map(|x| x / n).collect();
    Ok(units.softmax(&g, tau).0)
}

struct CellTrace {
    input: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
    p_abnormal: f64,
    p_normal: f64,
}

/// Intermediate values retained for the backward pass.
pub(crate) struct SemanticTrace {
    layers: Vec<Vec<CellTrace>>,
    units: UnitPrototypes,
    tau: f64,
}

pub(crate) fn semantic_forward(
    query: &FeatureRecord,
    protos: &TextPrototypes,
    adapter: &PatchTextAdapter,
    layers: &[u32],
    tau: f64,
) -> Result<(SemanticMaps, SemanticTrace)> {
    check_tau(tau)?;
    if layers.is_empty() {
        return Err(Error::Argument("layer set must not be empty".into()));
    }
    if adapter.d_text() != protos.d_text() {
        return Err(Error::Shape(format!(
            "adapter projects to {} dims, prototypes have {}",
            adapter.d_text(),
            protos.d_text()
        )));
    }
    let units = UnitPrototypes::new(protos)?;
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let scale = 1.0 / sorted.len() as f64;

    let mut maps: Option<SemanticMaps> = None;
    let mut traces = Vec::with_capacity(sorted.len());
    for &layer in &sorted {
        let grid = query.grid(layer)?;
        if grid.dim != adapter.d_patch() {
            return Err(Error::Shape(format!(
                "layer {layer} patch dim {} does not match adapter input {}",
                grid.dim,
                adapter.d_patch()
            )));
        }
        let m = maps.get_or_insert_with(|| SemanticMaps {
            normal: Grid::zeros(grid.h, grid.w),
            abnormal: Grid::zeros(grid.h, grid.w),
        });
        let mut cells = Vec::with_capacity(grid.h * grid.w);
        for (idx, cell) in grid.cells().enumerate() {
            let input = to_f64(cell);
            let z = adapter.affine.apply(&input);
            let n = norm(&z);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::ZeroNorm {
                    record: query.id.clone(),
                    layer,
                    i: idx / grid.w,
                    j: idx % grid.w,
                });
            }
            let unit: Vec<f64> = z.iter().map(|v| v / n).collect();
            let (p_abnormal, p_normal) = units.softmax(&unit, tau);
            m.abnormal.data[idx] += scale * p_abnormal;
            m.normal.data[idx] += scale * p_normal;
            cells.push(CellTrace {
                input,
                unit,
                norm: n,
                p_abnormal,
                p_normal,
            });
        }
        traces.push(cells);
    }
    Ok((
        maps.expect("non-empty layers"),
        SemanticTrace {
            layers: traces,
            units,
            tau,
        },
    ))
}

/// Accumulates into `grad` the adapter gradient given upstream gradients
/// with respect to the layer-averaged abnormal and normal maps.
pub(crate) fn semantic_backward(trace: &SemanticTrace, d_abnormal: &Grid, d_normal: &Grid, grad: &mut Affine) {
    let scale = 1.0 / trace.layers.len() as f64;
    let direction: Vec<f64> = trace
        .units
        .abnormal
        .iter()
        .zip(&trace.units.normal)
        .map(|(a, n)| (a - n) / trace.tau)
        .collect();
    let mut d_z = vec![0.0; direction.len()];
    for cells in &trace.layers {
        for (idx, cell) in cells.iter().enumerate() {
            let upstream = scale * (d_abnormal.data[idx] - d_normal.data[idx]);
            let d_logit = upstream * cell.p_abnormal * cell.p_normal;
            if d_logit == 0.0 {
                continue;
            }
            // d/du of the logit is `direction`; project out the radial part.
            let radial = dot(&cell.unit, &direction);
            for ((dz, dir), u) in d_z.iter_mut().zip(&direction).zip(&cell.unit) {
                *dz = d_logit * (dir - u * radial) / cell.norm;
            }
            grad.accumulate_grad(&d_z, &cell.input, 1.0);
        }
    }
}

/// Layer-averaged semantic maps of the projected patches.
pub fn semantic_maps(
    query: &FeatureRecord,
    protos: &TextPrototypes,
    phi: &PatchTextAdapter,
    layers: &[u32],
    tau: f64,
) -> Result<SemanticMaps> {
    semantic_forward(query, protos, phi, layers, tau).map(|(m, _)| m)
}

/// `(1 - alpha) * (s_i + s_q) / 2 + alpha * max(residual_map)`.
pub fn fuse_image_score(s_i: f64, s_q: f64, residual_map: &ResidualMap, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    residual_map.require_rescaled()?;
    Ok((1.0 - alpha) * (s_i + s_q) / 2.0 + alpha * residual_map.max())
}

pub(crate) fn average_with_residual(residual_map: &ResidualMap, abnormal: &Grid) -> Result<Grid> {
    residual_map.require_rescaled()?;
    residual_map.values().blend(0.5, abnormal, 0.5)
}

/// Element-wise mean of the rescaled residual map and the abnormal semantic map.
pub fn dasl_pixel_map(residual_map: &ResidualMap, maps: &SemanticMaps) -> Result<Grid> {
    average_with_residual(residual_map, &maps.abnormal)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::features::PatchGrid;

    fn record(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, layers: &[u32]) -> FeatureRecord {
        let mut grids = BTreeMap::new();
        for &l in layers {
            let data = (0..h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            grids.insert(l, PatchGrid::new(h, w, d, data).unwrap());
        }
        FeatureRecord {
            id: "q".into(),
            class_name: "c".into(),
            label: 0,
            mask: None,
            class_embed: (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            patch_grids: grids,
            image_dims: (h, w),
        }
    }

    fn adapter(rng: &mut ChaCha8Rng, d_text: usize, d_patch: usize, branch: Branch) -> PatchTextAdapter {
        let mut a = Affine::zeros(d_text, d_patch);
        a.weight.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        a.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        PatchTextAdapter::new(a, branch).unwrap()
    }

    fn protos(rng: &mut ChaCha8Rng, d: usize) -> TextPrototypes {
        TextPrototypes::new(
            (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn equal_similarities_give_one_half() {
        let p = TextPrototypes::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert!((semantic_score(&[1.0, 1.0], &p, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aligned_with_abnormal_orthogonal_to_normal() {
        let p = TextPrototypes::new(vec![0.0, 3.0, 0.0], vec![2.0, 0.0, 0.0]).unwrap();
        let s = semantic_score(&[2.0, 0.0, 0.0], &p, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s - e / (e + 1.0)).abs() < 1e-12);
        assert!((s - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn swap_complements_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = protos(&mut rng, 6);
        let g: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let s = semantic_score(&g, &p, 0.5).unwrap();
        let swapped = semantic_score(&g, &p.swapped(), 0.5).unwrap();
        assert!((s + swapped - 1.0).abs() < 1e-12);
        let scaled: Vec<f32> = g.iter().map(|v| v * 4.0).collect();
        assert!((semantic_score(&scaled, &p, 0.5).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn semantic_score_refuses_mismatched_dims_and_zero_norm() {
        let p = TextPrototypes::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            semantic_score(&[1.0, 0.0, 0.0], &p, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            semantic_score(&[0.0, 0.0], &p, 1.0),
            Err(Error::Normalization(_))
        ));
        assert!(semantic_score(&[1.0, 0.0], &p, 0.0).is_err());
    }

    #[test]
    fn equidistant_projections_give_uniform_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = record(&mut rng, 4, 3, 3, &[0]);
        // prototypes symmetric about the projected direction (e0)
        let p = TextPrototypes::new(vec![1.0, 1.0], vec![1.0, -1.0]).unwrap();
        let mut a = Affine::zeros(2, 4);
        a.bias[0] = 1.0;
        let phi = PatchTextAdapter::new(a, Branch::Dasl).unwrap();
        let m = semantic_maps(&q, &p, &phi, &[0], 1.0).unwrap();
        assert!(m
            .abnormal
            .data
            .iter()
            .chain(&m.normal.data)
            .all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn semantic_maps_match_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = record(&mut rng, 8, 4, 4, &[1, 4]);
        let p = protos(&mut rng, 6);
        let phi = adapter(&mut rng, 6, 8, Branch::Dasl);
        let tau = 0.7;
        let m = semantic_maps(&q, &p, &phi, &[4, 1], tau).unwrap();
        let cos = |a: &[f64], b: &[f32]| {
            let b: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
            let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            ab / (na * nb)
        };
        for i in 0..4 {
            for j in 0..4 {
                let mut sa = 0.0;
                let mut sn = 0.0;
                for l in [1u32, 4] {
                    let cell = q.grid(l).unwrap().cell(i, j);
                    let mut z = vec![0.0; 6];
                    for o in 0..6 {
                        z[o] = phi.affine.bias[o];
                        for k in 0..8 {
                            z[o] += phi.affine.weight[o * 8 + k] * f64::from(cell[k]);
                        }
                    }
                    let ea = (cos(&z, p.abnormal()) / tau).exp();
                    let en = (cos(&z, p.normal()) / tau).exp();
                    sa += ea / (ea + en) / 2.0;
                    sn += en / (ea + en) / 2.0;
                }
                assert!((m.abnormal.get(i, j) - sa).abs() < 1e-6);
                assert!((m.normal.get(i, j) - sn).abs() < 1e-6);
                assert!((m.abnormal.get(i, j) + m.normal.get(i, j) - 1.0).abs() < 1e-12);
            }
        }
        let single = semantic_maps(&q, &p, &phi, &[1], tau).unwrap();
        let (again, _) = semantic_forward(&q, &p, &phi, &[1], tau).unwrap();
        assert_eq!(single, again);
    }

    #[test]
    fn fusion_rules() {
        let map = ResidualMap::from_rescaled(Grid::from_vec(1, 2, vec![0.8, 0.1]).unwrap()).unwrap();
        assert!((fuse_image_score(0.4, 0.6, &map, 0.5).unwrap() - 0.65).abs() < 1e-15);
        assert_eq!(fuse_image_score(0.4, 0.6, &map, 0.0).unwrap(), 0.5);
        assert_eq!(fuse_image_score(0.4, 0.6, &map, 1.0).unwrap(), 0.8);
        assert!(fuse_image_score(0.4, 0.6, &map, 1.5).is_err());
        let raw = ResidualMap::raw(Grid::zeros(1, 1));
        assert!(fuse_image_score(0.4, 0.6, &raw, 0.5).is_err());
    }

    #[test]
    fn pixel_map_is_elementwise_mean() {
        let zeros = ResidualMap::from_rescaled(Grid::zeros(2, 2)).unwrap();
        let maps = SemanticMaps {
            normal: Grid::filled(2, 2, 0.5),
            abnormal: Grid::filled(2, 2, 0.5),
        };
        assert_eq!(dasl_pixel_map(&zeros, &maps).unwrap().data, vec![0.25; 4]);

        let g = Grid::from_vec(2, 2, vec![0.1, 0.9, 0.3, 0.0]).unwrap();
        let same = ResidualMap::from_rescaled(g.clone()).unwrap();
        let maps = SemanticMaps {
            normal: g.scale(-1.0),
            abnormal: g.clone(),
        };
        assert_eq!(dasl_pixel_map(&same, &maps).unwrap(), g);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let res = ResidualMap::from_rescaled(Grid::from_vec(2, 3, a.clone()).unwrap()).unwrap();
        let maps = SemanticMaps {
            normal: Grid::zeros(2, 3),
            abnormal: Grid::from_vec(2, 3, b.clone()).unwrap(),
        };
        let out = dasl_pixel_map(&res, &maps).unwrap();
        for k in 0..6 {
            assert!((out.data[k] - (a[k] + b[k]) / 2.0).abs() < 1e-15);
        }
        let wrong = SemanticMaps {
            normal: Grid::zeros(3, 2),
            abnormal: Grid::zeros(3, 2),
        };
        assert!(dasl_pixel_map(&res, &wrong).is_err());
    }
}
