//! Central finite-difference verification of analytic gradients.

use super::params::{AdapterGrads, AdapterParams, TENSOR_NAMES};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Denominator floor so that two near-zero derivatives compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub tensor: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Discrepancy>,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` for every
/// element of the tensors at positions `tensors` (checkpoint order).
pub fn finite_difference_check<F>(
    params: &AdapterParams,
    analytic: &AdapterGrads,
    tensors: &[usize],
    step: f64,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&AdapterParams) -> Result<f64>,
{
    let mut report = GradCheck::default();
    let grads = analytic.tensors();
    let mut probe = params.clone();
    for &t in tensors {
        let len = grads[t].1.len();
        for index in 0..len {
            let original = probe.tensors_mut()[t][index];
            probe.tensors_mut()[t][index] = original + step;
            let plus = loss(&probe)?;
            probe.tensors_mut()[t][index] = original - step;
            let minus = loss(&probe)?;
            probe.tensors_mut()[t][index] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[t].1[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.max_rel_error = rel;
                report.worst = Some(Discrepancy {
                    tensor: TENSOR_NAMES[t],
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
