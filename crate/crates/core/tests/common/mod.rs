//! Fixtures and brute-force reference implementations shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gads::features::{FeatureRecord, Mask, PatchGrid, PromptBank, TextPrototypes};
use gads::tensor::Grid;
use gads::training::AdapterParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps the fixtures independent of the crate's own sampling.
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub struct Layout {
    pub d_cls: usize,
    pub d_patch: usize,
    pub h: usize,
    pub w: usize,
    pub layers: Vec<u32>,
    pub image: (usize, usize),
}

impl Layout {
    pub fn small() -> Self {
        Self {
            d_cls: 8,
            d_patch: 8,
            h: 4,
            w: 4,
            layers: vec![0, 1],
            image: (8, 8),
        }
    }
}

/// Random record; abnormal records get a random non-empty rectangle mask,
/// normal ones an empty mask when `with_mask`.
pub fn random_record(rng: &mut ChaCha8Rng, layout: &Layout, id: &str, label: u8, with_mask: bool) -> FeatureRecord {
    let class_embed = gaussian_vec(rng, layout.d_cls, 1.0)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut patch_grids = BTreeMap::new();
    for &l in &layout.layers {
        let data = gaussian_vec(rng, layout.h * layout.w * layout.d_patch, 1.0)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        patch_grids.insert(l, PatchGrid::new(layout.h, layout.w, layout.d_patch, data).unwrap());
    }
    let (ih, iw) = layout.image;
    let mask = with_mask.then(|| {
        let mut m = Mask::zeros(ih, iw);
        if label == 1 {
            let (i0, j0) = (rng.random_range(0..ih), rng.random_range(0..iw));
            let (i1, j1) = (rng.random_range(i0..ih), rng.random_range(j0..iw));
            for i in i0..=i1 {
                for j in j0..=j1 {
                    m.data[i * iw + j] = 1;
                }
            }
        }
        m
    });
    FeatureRecord {
        id: id.to_string(),
        class_name: "c".into(),
        label,
        mask,
        class_embed,
        patch_grids,
        image_dims: layout.image,
    }
}

pub fn random_bank(rng: &mut ChaCha8Rng, layout: &Layout, k: usize) -> PromptBank {
    PromptBank::new(
        (0..k)
            .map(|i| random_record(rng, layout, &format!("p{i}"), 0, true))
            .collect(),
    )
    .unwrap()
}

pub fn random_protos(rng: &mut ChaCha8Rng, d: usize) -> TextPrototypes {
    let f = |rng: &mut ChaCha8Rng| gaussian_vec(rng, d, 1.0).into_iter().map(|v| v as f32).collect();
    TextPrototypes::new(f(rng), f(rng)).unwrap()
}

/// Seeded parameters with every tensor perturbed away from its initializer.
pub fn random_params(rng: &mut ChaCha8Rng, d_cls: usize, d_patch: usize, d_text: usize) -> AdapterParams {
    let mut p = AdapterParams::init(d_cls, d_patch, d_text, rng.random());
    for t in p.tensors_mut() {
        let noise = gaussian_vec(rng, t.len(), 0.3);
        for (v, n) in t.iter_mut().zip(noise) {
            *v += n;
        }
    }
    p
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, levels: u32) -> Grid {
    Grid::from_vec(
        h,
        w,
        (0..h * w)
            .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
            .collect(),
    )
    .unwrap()
}

// ---- metric references ----

/// Pairwise Mann-Whitney count with half credit for ties.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut acc, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    acc += 1.0;
                } else if si == sj {
                    acc += 0.5;
                }
            }
        }
    }
    acc / pairs
}

/// Average precision by thresholding at every distinct score.
pub fn ap_sweep(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut k) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                k += 1.0;
                if l == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * (tp / k);
        prev_recall = recall;
    }
    ap
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

/// Regions of one mask as lists of pixel indices, via union-find over
/// all 8-neighbour pairs.
pub fn regions_union_find(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.h, mask.w);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for i in 0..h {
        for j in 0..w {
            if mask.data[i * w + j] == 0 {
                continue;
            }
            for (di, dj) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                    continue;
                }
                let q = ni as usize * w + nj as usize;
                if mask.data[q] == 1 {
                    let (a, b) = (find(&mut parent, i * w + j), find(&mut parent, q));
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in 0..h * w {
        if mask.data[p] == 1 {
            let r = find(&mut parent, p);
            groups.entry(r).or_default().push(p);
        }
    }
    groups.into_values().collect()
}

/// Operating points by re-thresholding every map at each distinct value.
pub fn pro_points(maps: &[Grid], masks: &[Mask]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(k, m)| regions_union_find(m).into_iter().map(move |r| (k, r)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.data.iter().filter(|&&v| v == 0).count()).sum();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut fp = 0;
        for (map, mask) in maps.iter().zip(masks) {
            fp += map
                .data
                .iter()
                .zip(&mask.data)
                .filter(|(&v, &g)| g == 0 && v >= t)
                .count();
        }
        let overlap: f64 = regions
            .iter()
            .map(|(k, r)| r.iter().filter(|&&p| maps[*k].data[p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        points.push((fp as f64 / negatives as f64, overlap));
    }
    points
}

/// Trapezoid area over points with FPR within the limit, the last such
/// point held flat up to the limit, normalized by the limit.
pub fn pro_reference(maps: &[Grid], masks: &[Mask], limit: f64) -> f64 {
    let points: Vec<(f64, f64)> = pro_points(maps, masks).into_iter().filter(|p| p.0 <= limit).collect();
    let mut area = 0.0;
    for k in 1..points.len() {
        area += (points[k].0 - points[k - 1].0) * (points[k].1 + points[k - 1].1) / 2.0;
    }
    let last = points.last().unwrap();
    (area + (limit - last.0) * last.1) / limit
}

/// Corner-aligned bilinear resampling evaluated pixel by pixel.
pub fn bilinear_reference(src: &Grid, h: usize, w: usize) -> Grid {
    let coord = |p: usize, n_dst: usize, n_src: usize| {
        if n_dst == 1 || n_src == 1 {
            0.0
        } else {
            p as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
        }
    };
    let mut out = Grid::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (coord(i, h, src.h), coord(j, w, src.w));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src.h - 1), (x0 + 1).min(src.w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
            let bottom = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
            out.set(i, j, top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
