//! Pinball and combined training losses.

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, Result};
use crate::volume::{ensure_dims, HeuristicPrediction, VoxelVolume};

/// Quantile loss: `(y - q) * beta` when `y > q`, else `(q - y) * (1 - beta)`.
pub fn pinball_loss(q_hat: f64, y: f64, beta: f64) -> Result<f64> {
    check_open_unit("beta", beta)?;
    Ok(pinball(q_hat, y, beta))
}

#[inline]
pub(crate) fn pinball(q_hat: f64, y: f64, beta: f64) -> f64 {
    if y > q_hat {
        (y - q_hat) * beta
    } else {
        (q_hat - y) * (1.0 - beta)
    }
}

/// d pinball / d q_hat; at the kink the `y <= q` branch is used.
#[inline]
pub(crate) fn pinball_grad(q_hat: f64, y: f64, beta: f64) -> f64 {
    if y > q_hat {
        -beta
    } else {
        1.0 - beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    pub lower: f64,
    pub upper: f64,
}

impl QuantileLevels {
    /// `alpha / 2` and `1 - alpha / 2`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        check_open_unit("alpha", alpha)?;
        Ok(Self {
            lower: alpha / 2.0,
            upper: 1.0 - alpha / 2.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("lower quantile", self.lower)?;
        check_open_unit("upper quantile", self.upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lower: 1.0,
            upper: 1.0,
            point: 1.0,
        }
    }
}

/// Loss of one voxel given its point prediction and offsets.
#[inline]
pub(crate) fn voxel_objective(point: f64, lower: f64, upper: f64, y: f64, q: QuantileLevels, w: LossWeights) -> f64 {
    w.lower * pinball(point - lower, y, q.lower)
        + w.upper * pinball(point + upper, y, q.upper)
        + w.point * (y - point) * (y - point)
}

/// Mean over voxels of the lower/upper pinball terms plus the squared error, unit weights.
pub fn combined_objective(pred: &HeuristicPrediction, dose: &VoxelVolume, alpha: f64) -> Result<f64> {
    combined_objective_with(pred, dose, QuantileLevels::from_alpha(alpha)?, LossWeights::default())
}

pub fn combined_objective_with(
    pred: &HeuristicPrediction,
    dose: &VoxelVolume,
    levels: QuantileLevels,
    weights: LossWeights,
) -> Result<f64> {
    ensure_dims(pred.dims(), dose.dims())?;
    levels.validate()?;
    let total: f64 = pred
        .point()
        .values()
        .iter()
        .zip(pred.lower_offset().values())
        .zip(pred.upper_offset().values())
        .zip(dose.values())
        .map(|(((&p, &l), &u), &y)| voxel_objective(p, l, u, y, levels, weights))
        .sum();
    Ok(total / dose.len() as f64)
}
