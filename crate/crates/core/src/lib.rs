//! Risk-controlling prediction sets for voxelwise dose prediction.
//!
//! A heuristic interval `[p - λ·l, p + λ·u]` is produced per voxel by a
//! quantile model; the scaling `λ` is then calibrated on held-out segments so
//! that the expected fraction of uncovered voxels stays below `alpha` with
//! probability at least `1 - delta`. [`calibration::sg_rcps_calibrate`]
//! enforces this separately for every anatomical subgroup, while
//! [`calibration::rcps_calibrate`] only controls the pooled risk.
//!
//! With the default `parallel` feature, per-sample work and Monte Carlo trials
//! run on rayon; [`par::Execution::Sequential`] gives the same results on one
//! thread.

pub mod calibration;
pub mod error;
pub mod experiment;
pub mod interval;
pub mod model;
pub mod par;
pub mod rng;
pub mod synth;
pub mod volume;

pub use calibration::{
    hoeffding_penalty, hoeffding_ucb, rcps_calibrate, sg_rcps_calibrate, CalibrationResult, CalibrationSet, GridConfig,
};
pub use error::{Error, Result};
pub use interval::{build_interval, empirical_interval_loss, LossDenominator};
pub use par::Execution;
pub use volume::{Dims, HeuristicPrediction, IntervalField, Sample, SubgroupId, SubgroupMask, VoxelVolume};
