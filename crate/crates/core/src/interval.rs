//! Scaled interval construction and the per-sample miscoverage loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ensure_dims, HeuristicPrediction, IntervalField, SubgroupMask, VoxelVolume};

/// Normaliser for the per-sample subgroup loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossDenominator {
    /// Misses divided by the number of voxels in the subgroup mask.
    #[default]
    Masked,
    /// Misses divided by the full volume size `W*H*D`, for every subgroup.
    Whd,
}

impl LossDenominator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "whd" => Ok(Self::Whd),
            other => Err(Error::Config(format!(
                "unknown denominator {other:?}, expected masked|whd"
            ))),
        }
    }

    pub(crate) fn divisor(self, mask: &SubgroupMask) -> usize {
        match self {
            Self::Masked => mask.count(),
            Self::Whd => mask.dims().len(),
        }
    }
}

/// `[point - lambda * lower_offset, point + lambda * upper_offset]`, voxelwise.
pub fn build_interval(pred: &HeuristicPrediction, lambda: f64) -> Result<IntervalField> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
            reason: "interval scaling must be a finite nonnegative number",
        });
    }
    let point = pred.point().values();
    let lo = point
        .iter()
        .zip(pred.lower_offset().values())
        .map(|(&p, &l)| lower_bound(p, l, lambda))
        .collect();
    let hi = point
        .iter()
        .zip(pred.upper_offset().values())
        .map(|(&p, &u)| upper_bound(p, u, lambda))
        .collect();
    Ok(IntervalField {
        lo: VoxelVolume::new(pred.dims(), lo)?,
        hi: VoxelVolume::new(pred.dims(), hi)?,
        lambda,
    })
}

// The critical-lambda fast path relies on these exact expressions.
#[inline]
pub(crate) fn lower_bound(point: f64, lower_offset: f64, lambda: f64) -> f64 {
    point - lambda * lower_offset
}

#[inline]
pub(crate) fn upper_bound(point: f64, upper_offset: f64, lambda: f64) -> f64 {
    point + lambda * upper_offset
}

/// Voxel is covered by the closed interval `[lo, hi]`.
#[inline]
pub(crate) fn covered(dose: f64, lo: f64, hi: f64) -> bool {
    !(dose < lo || dose > hi)
}

/// Fraction of masked voxels whose dose lies outside the interval.
pub fn empirical_interval_loss(interval: &IntervalField, dose: &VoxelVolume, mask: &SubgroupMask) -> Result<f64> {
    empirical_interval_loss_with(interval, dose, mask, LossDenominator::Masked)
}

pub fn empirical_interval_loss_with(
    interval: &IntervalField,
    dose: &VoxelVolume,
    mask: &SubgroupMask,
    denominator: LossDenominator,
) -> Result<f64> {
    let (misses, _) = count_misses(interval, dose, mask)?;
    Ok(misses as f64 / denominator.divisor(mask) as f64)
}

/// `(misses, masked voxel count)` for one sample and subgroup.
pub fn count_misses(interval: &IntervalField, dose: &VoxelVolume, mask: &SubgroupMask) -> Result<(usize, usize)> {
    let dims = dose.dims();
    ensure_dims(dims, interval.lo.dims())?;
    ensure_dims(dims, mask.dims())?;
    let mut misses = 0;
    let mut members = 0;
    let iter = dose
        .values()
        .iter()
        .zip(interval.lo.values())
        .zip(interval.hi.values())
        .zip(mask.membership());
    for (((&y, &lo), &hi), &m) in iter {
        if m {
            members += 1;
            if !covered(y, lo, hi) {
                misses += 1;
            }
        }
    }
    if members == 0 {
        return Err(Error::EmptySubgroup { subgroup: mask.id().0 });
    }
    Ok((misses, members))
}
