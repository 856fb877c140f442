//! Seeded synthetic feature sets with planted anomalous patch blocks.
//!
//! Every class owns one atom per layer plus one atom per grid cell, so
//! records of a class line up cell by cell the way aligned objects would.
//! An abnormal record shifts a square block of cells (and, more weakly, its
//! class token) along the abnormal text prototype direction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    write_feature_file, write_prototypes_file, FeatureDims, FeatureRecord, FeatureSet, Mask, PatchGrid, TextPrototypes,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_normal: usize,
    pub train_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    /// Normal records per class in the inference prompt pool.
    pub pool_normal: usize,
    pub d_cls: usize,
    pub d_patch: usize,
    pub d_text: usize,
    pub grid: (usize, usize),
    pub image: (usize, usize),
    pub layers: Vec<u32>,
    /// Side of the planted block, in grid cells.
    pub block: usize,
    /// Shift of planted cells along the abnormal direction, relative to a unit atom.
    pub magnitude: f64,
    /// Class-token shift relative to `magnitude`.
    pub class_shift: f64,
    /// Per-component noise, relative to a unit atom.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_normal: 200,
            train_abnormal: 50,
            test_normal: 100,
            test_abnormal: 50,
            pool_normal: 16,
            d_cls: 32,
            d_patch: 32,
            d_text: 32,
            grid: (8, 8),
            image: (32, 32),
            layers: vec![0, 1],
            block: 4,
            magnitude: 1.0,
            class_shift: 0.5,
            noise: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let degenerate = |what: &str| Err(Error::Config(format!("degenerate synthetic config: {what}")));
        if self.classes == 0 {
            return degenerate("no classes");
        }
        if self.d_cls == 0 || self.d_patch == 0 || self.d_text == 0 {
            return degenerate("zero feature dimension");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return degenerate("empty grid");
        }
        if self.image.0 < self.grid.0 || self.image.1 < self.grid.1 {
            return degenerate("image smaller than the patch grid");
        }
        if self.block == 0 || self.block > self.grid.0.min(self.grid.1) {
            return degenerate("block does not fit the grid");
        }
        if self.layers.is_empty() {
            return degenerate("no layers");
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return degenerate("magnitude must be non-negative");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.class_shift.is_finite()) {
            return degenerate("noise and class shift must be finite");
        }
        Ok(())
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            d_cls: self.d_cls,
            d_patch: self.d_patch,
            h: self.grid.0,
            w: self.grid.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub prompts: FeatureSet,
    pub protos: TextPrototypes,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Unit vector in `d` dimensions taken cyclically from `source`.
fn direction(source: &[f32], d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|k| f64::from(source[k % source.len()])).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Grid cell that each image row (or column) falls on under corner-aligned resampling.
fn pixel_to_cell(pixels: usize, cells: usize) -> Vec<usize> {
    if pixels == 1 {
        return vec![0];
    }
    (0..pixels)
        .map(|p| ((p * (cells - 1)) as f64 / (pixels - 1) as f64).round() as usize)
        .collect()
}

struct ClassModel {
    name: String,
    cls_atom: Vec<f64>,
    /// `[layer][cell]` atoms.
    cell_atoms: Vec<Vec<Vec<f64>>>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    patch_dir: Vec<f64>,
    cls_dir: Vec<f64>,
    noise: Normal<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Generator<'_> {
    fn record(&self, rng: &mut ChaCha8Rng, class: &ClassModel, id: String, abnormal: bool) -> Result<FeatureRecord> {
        let cfg = self.cfg;
        let (h, w) = cfg.grid;
        // Drawn for every record so that magnitude 0 leaves the stream unchanged.
        let top = rng.random_range(0..=h - cfg.block);
        let left = rng.random_range(0..=w - cfg.block);
        let in_block = |i: usize, j: usize| {
            abnormal && (top..top + cfg.block).contains(&i) && (left..left + cfg.block).contains(&j)
        };

        let cls_sigma = cfg.noise / (cfg.d_cls as f64).sqrt();
        let cls_shift = if abnormal { cfg.magnitude * cfg.class_shift } else { 0.0 };
        let class_embed = class
            .cls_atom
            .iter()
            .zip(&self.cls_dir)
            .map(|(a, d)| (a + cls_sigma * self.noise.sample(rng) + cls_shift * d) as f32)
            .collect();

        let sigma = cfg.noise / (cfg.d_patch as f64).sqrt();
        let mut patch_grids = BTreeMap::new();
        for (li, &layer) in cfg.layers.iter().enumerate() {
            let mut data = Vec::with_capacity(h * w * cfg.d_patch);
            for cell in 0..h * w {
                let shift = if in_block(cell / w, cell % w) {
                    cfg.magnitude
                } else {
                    0.0
                };
                for (a, d) in class.cell_atoms[li][cell].iter().zip(&self.patch_dir) {
                    data.push((a + sigma * self.noise.sample(rng) + shift * d) as f32);
                }
            }
            patch_grids.insert(layer, PatchGrid::new(h, w, cfg.d_patch, data)?);
        }

        let (ih, iw) = cfg.image;
        let mut mask = vec![0u8; ih * iw];
        for (pi, &ci) in self.rows.iter().enumerate() {
            for (pj, &cj) in self.cols.iter().enumerate() {
                mask[pi * iw + pj] = u8::from(in_block(ci, cj));
            }
        }
        Ok(FeatureRecord {
            id,
            class_name: class.name.clone(),
            label: u8::from(abnormal),
            mask: Some(Mask::new(ih, iw, mask)?),
            class_embed,
            patch_grids,
            image_dims: cfg.image,
        })
    }
}

/// Generates train, test and prompt-pool sets plus text prototypes.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let protos = TextPrototypes::new(
        to_f32(unit_gaussian(&mut rng, cfg.d_text)),
        to_f32(unit_gaussian(&mut rng, cfg.d_text)),
    )?;
    let cells = cfg.grid.0 * cfg.grid.1;
    let classes: Vec<ClassModel> = (0..cfg.classes)
        .map(|c| {
            let cls_atom = unit_gaussian(&mut rng, cfg.d_cls);
            let cell_atoms = cfg
                .layers
                .iter()
                .map(|_| {
                    let base = unit_gaussian(&mut rng, cfg.d_patch);
                    (0..cells)
                        .map(|_| {
                            let local = unit_gaussian(&mut rng, cfg.d_patch);
                            base.iter().zip(&local).map(|(b, l)| (b + l) / 2f64.sqrt()).collect()
                        })
                        .collect()
                })
                .collect();
            ClassModel {
                name: format!("class{c}"),
                cls_atom,
                cell_atoms,
            }
        })
        .collect();
    let gen = Generator {
        cfg,
        patch_dir: direction(protos.abnormal(), cfg.d_patch),
        cls_dir: direction(protos.abnormal(), cfg.d_cls),
        noise: Normal::new(0.0, 1.0).expect("unit normal"),
        rows: pixel_to_cell(cfg.image.0, cfg.grid.0),
        cols: pixel_to_cell(cfg.image.1, cfg.grid.1),
    };

    let mut splits: [Vec<FeatureRecord>; 3] = Default::default();
    let plan = [
        ("train", cfg.train_normal, cfg.train_abnormal),
        ("test", cfg.test_normal, cfg.test_abnormal),
        ("pool", cfg.pool_normal, 0),
    ];
    for class in &classes {
        for (records, &(split, normal, abnormal)) in splits.iter_mut().zip(&plan) {
            for n in 0..normal + abnormal {
                let id = format!("{split}/{}/{n:04}", class.name);
                records.push(gen.record(&mut rng, class, id, n >= normal)?);
            }
        }
    }
    let [train, test, pool] = splits;
    let set = |records| FeatureSet::new(records, cfg.layers.clone(), cfg.dims());
    Ok(SynthData {
        train: set(train)?,
        test: set(test)?,
        prompts: set(pool)?,
        protos,
    })
}

/// File names written by [`write_synth`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub prompts: PathBuf,
    pub protos: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.gads"),
            test: dir.join("test.gads"),
            prompts: dir.join("prompts.gads"),
            protos: dir.join("protos.gtp"),
        }
    }
}

pub fn write_synth(data: &SynthData, dir: impl AsRef<Path>) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths::in_dir(dir);
    write_feature_file(&data.train, &paths.train)?;
    write_feature_file(&data.test, &paths.test)?;
    write_feature_file(&data.prompts, &paths.prompts)?;
    write_prototypes_file(&data.protos, &paths.protos)?;
    Ok(paths)
}
