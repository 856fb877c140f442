use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::features::Mask;
use crate::tensor::Grid;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Labels the 8-connected foreground regions of a mask. Returns the label
/// per pixel (0 for background, regions from 1) and the region count.
pub fn connected_regions(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let q = ni as usize * w + nj as usize;
                    if mask.data[q] == 1 && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Operating points `(fpr, mean region overlap)` of a descending threshold
/// sweep over the pooled map values, starting at `(0, 0)`.
pub fn pro_curve(maps: &[Grid], masks: &[Mask]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    // (value, region id or usize::MAX for normal pixels)
    let mut pixels = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != (mask.h, mask.w) {
            return Err(Error::Shape(format!(
                "map {:?} vs mask {:?}",
                map.shape(),
                (mask.h, mask.w)
            )));
        }
        if map.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("map values must be finite".into()));
        }
        let (labels, count) = connected_regions(mask);
        let offset = region_sizes.len();
        region_sizes.resize(offset + count, 0);
        for (&v, &l) in map.data.iter().zip(&labels) {
            if l == 0 {
                pixels.push((v, usize::MAX));
            } else {
                region_sizes[offset + l - 1] += 1;
                pixels.push((v, offset + l - 1));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric("PRO needs at least one anomalous region".into()));
    }
    let negatives = pixels.iter().filter(|(_, r)| *r == usize::MAX).count();
    if negatives == 0 {
        return Err(Error::UndefinedMetric("PRO needs at least one normal pixel".into()));
    }
    pixels.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut hits = vec![0usize; region_sizes.len()];
    let mut false_pos = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut start = 0;
    while start < pixels.len() {
        let mut end = start + 1;
        while end < pixels.len() && pixels[end].0 == pixels[start].0 {
            end += 1;
        }
        for &(_, r) in &pixels[start..end] {
            if r == usize::MAX {
                false_pos += 1;
            } else {
                hits[r] += 1;
            }
        }
        let mean_overlap = hits
            .iter()
            .zip(&region_sizes)
            .map(|(&h, &s)| h as f64 / s as f64)
            .sum::<f64>()
            / region_sizes.len() as f64;
        curve.push((false_pos as f64 / negatives as f64, mean_overlap));
        start = end;
    }
    Ok(curve)
}

/// Normalized area under a PRO curve up to `fpr_limit`. Points past the
/// limit are dropped; the last admissible point is held flat to the limit.
pub fn integrate_pro_curve(curve: &[(f64, f64)], fpr_limit: f64) -> f64 {
    let admissible: Vec<(f64, f64)> = curve.iter().copied().filter(|(f, _)| *f <= fpr_limit).collect();
    let mut area = 0.0;
    for pair in admissible.windows(2) {
        let ((f0, p0), (f1, p1)) = (pair[0], pair[1]);
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    if let Some(&(f, p)) = admissible.last() {
        area += (fpr_limit - f) * p;
    }
    area / fpr_limit
}

/// Per-region overlap score integrated over `[0, fpr_limit]`.
pub fn pro(maps: &[Grid], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Argument(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    Ok(integrate_pro_curve(&pro_curve(maps, masks)?, fpr_limit))
}
