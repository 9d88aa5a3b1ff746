use thiserror::Error;

use crate::volume::{Dims, SubgroupId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: Dims, actual: Dims },

    #[error("volume of dims {dims} needs {expected} values, got {actual}")]
    LengthMismatch { dims: Dims, expected: usize, actual: usize },

    #[error("non-finite value {value} at voxel {index} in {what}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("subgroup {} has no voxels in this sample", SubgroupId(*subgroup))]
    EmptySubgroup { subgroup: u32 },

    #[error("calibration set for subgroup {} is empty after dropping empty masks", SubgroupId(*subgroup))]
    EmptyCalibrationSet { subgroup: u32 },

    #[error(
        "irreducible penalty for subgroup {}: Hoeffding term {penalty:.6} >= alpha {alpha} \
         with n = {n}; at least {min_n} calibration samples are needed",
        SubgroupId(*subgroup)
    )]
    IrreduciblePenalty {
        subgroup: u32,
        n: usize,
        penalty: f64,
        alpha: f64,
        min_n: usize,
    },

    #[error("training diverged at epoch {epoch} (loss {loss}); learning rate {learning_rate} is too high")]
    Diverged {
        epoch: usize,
        loss: f64,
        learning_rate: f64,
    },

    #[error("model expects {expected} feature channels, sample has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("insufficient trials: {got} feasible for {method}, need at least {needed}")]
    InsufficientTrials { method: String, got: usize, needed: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier, used as the machine-readable error prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } | Error::LengthMismatch { .. } => "dims",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::EmptySubgroup { .. } => "empty-subgroup",
            Error::EmptyCalibrationSet { .. } => "empty-calibration-set",
            Error::IrreduciblePenalty { .. } => "irreducible-penalty",
            Error::Diverged { .. } => "diverged",
            Error::ChannelMismatch { .. } => "channel-mismatch",
            Error::InsufficientTrials { .. } => "insufficient-trials",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_open_unit(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must lie in the open interval (0, 1)",
        })
    }
}
