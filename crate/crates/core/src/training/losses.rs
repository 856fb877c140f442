//! Focal and dice losses with their derivatives.

use crate::error::{Error, Result};
use crate::features::Mask;
use crate::tensor::Grid;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// `-weight * (1 - p)^gamma * ln p` and its derivative in `p`.
/// The derivative is zero where the clamp is active.
fn focal_term(p: f64, weight: f64, gamma: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = 1.0 - clamped;
    let modulator = q.powf(gamma);
    let log_p = clamped.ln();
    let value = -weight * modulator * log_p;
    if clamped != p {
        return (value, 0.0);
    }
    let d_modulator = if gamma == 0.0 {
        0.0
    } else {
        -gamma * q.powf(gamma - 1.0)
    };
    (value, -weight * (d_modulator * log_p + modulator / clamped))
}

/// Value and derivative in `p` of the binary focal loss.
pub(crate) fn focal_binary_with_grad(p: f64, y: u8, gamma: f64, balance: f64) -> (f64, f64) {
    if y == 1 {
        focal_term(p, balance, gamma)
    } else {
        let (v, d) = focal_term(1.0 - p, 1.0 - balance, gamma);
        (v, -d)
    }
}

/// Binary focal loss
/// `-b*y*(1-p)^g*ln p - (1-b)*(1-y)*p^g*ln(1-p)` with `p` clamped away from 0 and 1.
pub fn focal_loss_binary(p: f64, y: u8, gamma: f64, balance: f64) -> f64 {
    focal_binary_with_grad(p, y, gamma, balance).0
}

fn check_mask(grid: &Grid, mask: &Mask, what: &str) -> Result<()> {
    if (grid.h, grid.w) != (mask.h, mask.w) {
        return Err(Error::Shape(format!(
            "{what}: map ({}, {}) vs mask ({}, {})",
            grid.h, grid.w, mask.h, mask.w
        )));
    }
    Ok(())
}

pub(crate) struct FocalMapGrad {
    pub loss: f64,
    pub d_normal: Grid,
    pub d_abnormal: Grid,
}

pub(crate) fn focal_map_with_grad(
    p_normal: &Grid,
    p_abnormal: &Grid,
    mask: &Mask,
    gamma: f64,
    balance: f64,
) -> Result<FocalMapGrad> {
    p_normal.ensure_same_shape(p_abnormal, "focal loss channels")?;
    check_mask(p_abnormal, mask, "focal loss")?;
    let n = mask.data.len() as f64;
    let mut d_normal = Grid::zeros(mask.h, mask.w);
    let mut d_abnormal = Grid::zeros(mask.h, mask.w);
    let mut total = 0.0;
    for (idx, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            let (v, d) = focal_term(p_abnormal.data[idx], balance, gamma);
            total += v;
            d_abnormal.data[idx] = d / n;
        } else {
            let (v, d) = focal_term(p_normal.data[idx], 1.0 - balance, gamma);
            total += v;
            d_normal.data[idx] = d / n;
        }
    }
    Ok(FocalMapGrad {
        loss: total / n,
        d_normal,
        d_abnormal,
    })
}

/// Pixel-mean focal loss over a two-channel `(normal, abnormal)` probability map.
/// The target channel is `abnormal` where the mask is 1 and `normal` elsewhere.
pub fn focal_loss_map(p_normal: &Grid, p_abnormal: &Grid, mask: &Mask, gamma: f64, balance: f64) -> Result<f64> {
    focal_map_with_grad(p_normal, p_abnormal, mask, gamma, balance).map(|g| g.loss)
}

pub(crate) fn dice_with_grad(pred: &Grid, mask: &Mask, eps: f64) -> Result<(f64, Grid)> {
    check_mask(pred, mask, "dice loss")?;
    let mut inter = 0.0;
    let mut sum_pred = 0.0;
    let mut sum_mask = 0.0;
    for (p, &m) in pred.data.iter().zip(&mask.data) {
        let m = f64::from(m);
        inter += p * m;
        sum_pred += p;
        sum_mask += m;
    }
    let num = 2.0 * inter + eps;
    let den = sum_pred + sum_mask + eps;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = mask
        .data
        .iter()
        .map(|&m| -(2.0 * f64::from(m) * den - num) / den2)
        .collect();
    Ok((loss, Grid::from_vec(pred.h, pred.w, grad)?))
}

/// Smoothed dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(pred: &Grid, mask: &Mask, eps: f64) -> Result<f64> {
    dice_with_grad(pred, mask, eps).map(|(l, _)| l)
}
