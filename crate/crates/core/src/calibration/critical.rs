//! Per-voxel critical scaling: the smallest `lambda` at which a voxel's dose
//! falls inside its interval.
//!
//! The value is the exact floating-point threshold of the same bound
//! expressions used by [`crate::interval::build_interval`], so thresholding at a
//! grid `lambda` reproduces the reference voxel count bit for bit.

use crate::error::Result;
use crate::interval::{lower_bound, upper_bound};
use crate::volume::{ensure_dims, Dims, HeuristicPrediction, VoxelVolume};

/// Critical scalings for one volume; `+inf` marks voxels that no finite `lambda` covers.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalLambdas {
    dims: Dims,
    values: Vec<f64>,
}

impl CriticalLambdas {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest finite critical value, if any.
    pub fn max_finite(&self) -> Option<f64> {
        self.values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

pub fn critical_lambda(pred: &HeuristicPrediction, dose: &VoxelVolume) -> Result<CriticalLambdas> {
    let dims = pred.dims();
    ensure_dims(dims, dose.dims())?;
    let values = pred
        .point()
        .values()
        .iter()
        .zip(pred.lower_offset().values())
        .zip(pred.upper_offset().values())
        .zip(dose.values())
        .map(|(((&p, &l), &u), &y)| voxel_critical(p, l, u, y))
        .collect();
    Ok(CriticalLambdas { dims, values })
}

/// `max((p - y)/l, (y - p)/u, 0)`, refined to the exact float threshold.
pub(crate) fn voxel_critical(point: f64, lower_offset: f64, upper_offset: f64, dose: f64) -> f64 {
    let lo = smallest_satisfying(
        |lam| lower_bound(point, lower_offset, lam) <= dose,
        point - dose,
        lower_offset,
    );
    let hi = smallest_satisfying(
        |lam| dose <= upper_bound(point, upper_offset, lam),
        dose - point,
        upper_offset,
    );
    lo.max(hi)
}

/// Smallest nonnegative float `lambda` for which the monotone predicate holds.
fn smallest_satisfying(holds: impl Fn(f64) -> bool, residual: f64, offset: f64) -> f64 {
    if holds(0.0) {
        return 0.0;
    }
    if offset <= 0.0 {
        return f64::INFINITY;
    }
    let mut lam = residual / offset;
    if !lam.is_finite() {
        lam = f64::MAX;
    }
    while !holds(lam) {
        if lam == f64::MAX {
            return f64::INFINITY;
        }
        lam = lam.next_up();
    }
    loop {
        let down = lam.next_down();
        if down > 0.0 && holds(down) {
            lam = down;
        } else {
            return lam;
        }
    }
}
