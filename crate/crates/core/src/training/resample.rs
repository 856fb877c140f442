//! Corner-aligned bilinear upsampling from patch grids to image resolution.

use crate::error::{Error, Result};
use crate::tensor::Grid;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: 0.0,
                };
            }
            let pos = (o * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Precomputed bilinear resampler; linear, so it also provides its adjoint
/// for back-propagating pixel-level gradients onto the patch grid.
#[derive(Debug, Clone)]
pub struct Upsampler {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl Upsampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if dst.0 == 0 || dst.1 == 0 {
            return Err(Error::Argument(format!("target size {dst:?} must be positive")));
        }
        if src.0 == 0 || src.1 == 0 {
            return Err(Error::Argument(format!("source size {src:?} must be positive")));
        }
        if dst.0 < src.0 || dst.1 < src.1 {
            return Err(Error::Argument(format!(
                "target {dst:?} is smaller than source {src:?}"
            )));
        }
        Ok(Self {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        })
    }

    pub fn forward(&self, map: &Grid) -> Result<Grid> {
        if map.shape() != self.src {
            return Err(Error::Shape(format!(
                "upsampler built for {:?}, got {:?}",
                self.src,
                map.shape()
            )));
        }
        let mut out = Grid::zeros(self.dst.0, self.dst.1);
        for (y, r) in self.rows.iter().enumerate() {
            for (x, c) in self.cols.iter().enumerate() {
                let top = (1.0 - c.frac) * map.get(r.lo, c.lo) + c.frac * map.get(r.lo, c.hi);
                let bottom = (1.0 - c.frac) * map.get(r.hi, c.lo) + c.frac * map.get(r.hi, c.hi);
                out.set(y, x, (1.0 - r.frac) * top + r.frac * bottom);
            }
        }
        Ok(out)
    }

    /// Transpose of [`Upsampler::forward`].
    pub fn adjoint(&self, grad: &Grid) -> Grid {
        debug_assert_eq!(grad.shape(), self.dst);
        let mut out = Grid::zeros(self.src.0, self.src.1);
        for (y, r) in self.rows.iter().enumerate() {
            for (x, c) in self.cols.iter().enumerate() {
                let g = grad.get(y, x);
                if g == 0.0 {
                    continue;
                }
                let w = self.src.1;
                out.data[r.lo * w + c.lo] += g * (1.0 - r.frac) * (1.0 - c.frac);
                out.data[r.lo * w + c.hi] += g * (1.0 - r.frac) * c.frac;
                out.data[r.hi * w + c.lo] += g * r.frac * (1.0 - c.frac);
                out.data[r.hi * w + c.hi] += g * r.frac * c.frac;
            }
        }
        out
    }
}

/// Bilinear, corner-aligned resize of `map` to `target = (h_img, w_img)`.
pub fn upsample(map: &Grid, target: (usize, usize)) -> Result<Grid> {
    Upsampler::new(map.shape(), target)?.forward(map)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Per-pixel reference: sample position `y * (h - 1) / (H - 1)` and blend
    /// the four surrounding cells.
    fn reference(map: &Grid, th: usize, tw: usize) -> Grid {
        let mut out = Grid::zeros(th, tw);
        for y in 0..th {
            for x in 0..tw {
                let sy = if th > 1 {
                    y as f64 * (map.h - 1) as f64 / (th - 1) as f64
                } else {
                    0.0
                };
                let sx = if tw > 1 {
                    x as f64 * (map.w - 1) as f64 / (tw - 1) as f64
                } else {
                    0.0
                };
                let mut v = 0.0;
                for i in 0..map.h {
                    for j in 0..map.w {
                        let wy = (1.0 - (sy - i as f64).abs()).max(0.0);
                        let wx = (1.0 - (sx - j as f64).abs()).max(0.0);
                        v += wy * wx * map.get(i, j);
                    }
                }
                out.set(y, x, v);
            }
        }
        out
    }

    #[test]
    fn constant_stays_constant_and_identity_size() {
        let c = Grid::filled(3, 2, 0.37);
        assert!(upsample(&c, (7, 9))
            .unwrap()
            .data
            .iter()
            .all(|v| (v - 0.37).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid::from_vec(3, 4, (0..12).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(upsample(&g, (3, 4)).unwrap(), g);
    }

    #[test]
    fn columns_interpolate_linearly() {
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = upsample(&g, (2, 4)).unwrap();
        let r = reference(&g, 2, 4);
        for k in 0..8 {
            assert!((out.data[k] - r.data[k]).abs() < 1e-15);
        }
        assert!((out.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.get(1, 2) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = upsample(&g, (13, 11)).unwrap();
        let r = reference(&g, 13, 11);
        for k in 0..out.data.len() {
            assert!((out.data[k] - r.data[k]).abs() < 1e-12);
        }
        assert!(out.max() <= g.max() + 1e-15 && out.min() >= g.min() - 1e-15);
    }

    #[test]
    fn adjoint_is_the_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let up = Upsampler::new((3, 4), (8, 9)).unwrap();
        let x = Grid::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Grid::from_vec(8, 9, (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lhs: f64 = up
            .forward(&x)
            .unwrap()
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x.data.iter().zip(&up.adjoint(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let g = Grid::zeros(4, 4);
        assert!(upsample(&g, (0, 4)).is_err());
        assert!(upsample(&g, (3, 8)).is_err());
    }
}
