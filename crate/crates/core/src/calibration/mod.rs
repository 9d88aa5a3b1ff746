//! Risk-controlling calibration of the interval scaling `lambda`.
//!
//! Both searches walk a fixed grid downward from `lambda_max`. At each grid
//! point the per-sample miscoverage losses of every subgroup are averaged and
//! inflated by the Hoeffding penalty; the search stops at the first grid point
//! whose bound exceeds `alpha` and returns the previous one.
//!
//! * [`rcps_calibrate`] controls a single calibration set.
//! * [`sg_rcps_calibrate`] controls several subgroups at once with one shared
//!   `lambda`, so its answer equals the largest single-subgroup answer.
//!
//! The penalty uses the full `delta` for each subgroup (no union bound), so the
//! per-subgroup statement holds at level `1 - delta` for each group separately,
//! not simultaneously.

mod critical;
mod hoeffding;

pub use critical::{critical_lambda, CriticalLambdas};
pub use hoeffding::{hoeffding_penalty, hoeffding_ucb, min_samples_for};

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, Error, Result};
use crate::interval::{build_interval, count_misses, LossDenominator};
use crate::par::Execution;
use crate::volume::{ensure_dims, HeuristicPrediction, Sample, SubgroupId, SubgroupMask, VoxelVolume};
use critical::voxel_critical;
use hoeffding::ucb_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lambda_max: f64,
    pub d_lambda: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambda_max: 10.0,
            d_lambda: 0.01,
        }
    }
}

impl GridConfig {
    pub fn new(lambda_max: f64, d_lambda: f64) -> Result<Self> {
        let grid = Self { lambda_max, d_lambda };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_lambda > 0.0 && self.d_lambda.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "d_lambda",
                value: self.d_lambda,
                reason: "step must be positive and finite",
            });
        }
        if !(self.lambda_max > self.d_lambda && self.lambda_max.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda_max",
                value: self.lambda_max,
                reason: "must be finite and exceed d_lambda",
            });
        }
        Ok(())
    }

    /// Grid values `lambda_max - k * d_lambda`, descending, all strictly positive.
    ///
    /// Values within `d_lambda / 2` of zero are treated as zero and dropped, so
    /// round-off never produces a tiny or negative last point.
    pub fn points(&self) -> Vec<f64> {
        let mut points = Vec::new();
        let mut k = 0u64;
        loop {
            let lambda = self.lambda_max - k as f64 * self.d_lambda;
            if lambda <= 0.5 * self.d_lambda {
                break;
            }
            points.push(lambda);
            k += 1;
        }
        points
    }

    /// `lambda_max = 1.1 x` the largest finite critical scaling over all sets.
    pub fn auto(d_lambda: f64, sets: &[CalibrationSet<'_>]) -> Result<Self> {
        let largest = sets
            .iter()
            .flat_map(|s| s.entries.iter())
            .filter_map(|e| {
                e.prediction
                    .point()
                    .values()
                    .iter()
                    .zip(e.prediction.lower_offset().values())
                    .zip(e.prediction.upper_offset().values())
                    .zip(e.dose.values())
                    .zip(e.mask.membership())
                    .filter(|(_, &m)| m)
                    .map(|((((&p, &l), &u), &y), _)| voxel_critical(p, l, u, y))
                    .filter(|c| c.is_finite())
                    .reduce(f64::max)
            })
            .fold(0.0f64, f64::max);
        Self::new((1.1 * largest).max(2.0 * d_lambda), d_lambda)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationEntry<'a> {
    pub prediction: &'a HeuristicPrediction,
    pub dose: &'a VoxelVolume,
    pub mask: &'a SubgroupMask,
}

/// Calibration samples for one subgroup. Entries whose mask is empty are dropped.
#[derive(Debug, Clone)]
pub struct CalibrationSet<'a> {
    subgroup: SubgroupId,
    entries: Vec<CalibrationEntry<'a>>,
}

impl<'a> CalibrationSet<'a> {
    pub fn new(subgroup: SubgroupId, entries: Vec<CalibrationEntry<'a>>) -> Result<Self> {
        let mut kept = Vec::with_capacity(entries.len());
        for e in entries {
            ensure_dims(e.prediction.dims(), e.dose.dims())?;
            ensure_dims(e.prediction.dims(), e.mask.dims())?;
            if !e.mask.is_empty() {
                kept.push(e);
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyCalibrationSet { subgroup: subgroup.0 });
        }
        Ok(Self {
            subgroup,
            entries: kept,
        })
    }

    /// Pairs predictions with samples, using each sample's mask for `subgroup`.
    pub fn from_samples(
        subgroup: SubgroupId,
        predictions: &'a [HeuristicPrediction],
        samples: &'a [Sample],
    ) -> Result<Self> {
        if predictions.len() != samples.len() {
            return Err(Error::Config(format!(
                "{} predictions for {} samples",
                predictions.len(),
                samples.len()
            )));
        }
        let entries = predictions
            .iter()
            .zip(samples)
            .map(|(prediction, sample)| {
                let mask = sample
                    .mask(subgroup)
                    .ok_or_else(|| Error::Config(format!("sample has no mask for subgroup {subgroup}")))?;
                Ok(CalibrationEntry {
                    prediction,
                    dose: &sample.dose,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subgroup, entries)
    }

    pub fn subgroup(&self) -> SubgroupId {
        self.subgroup
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[CalibrationEntry<'a>] {
        &self.entries
    }
}

/// How per-sample losses are evaluated during the grid scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossEngine {
    /// Sorted critical scalings per sample; a binary search per grid point.
    #[default]
    Fast,
    /// Rebuild the interval field and count misses at every grid point.
    Reference,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CalibrationOptions {
    pub denominator: LossDenominator,
    pub engine: LossEngine,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub lambda: f64,
    /// One bound per subgroup, in the order of [`CalibrationResult::subgroups`].
    pub ucb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Selected scaling; `None` when no grid point satisfies every bound.
    pub lambda_hat: Option<f64>,
    pub feasible: bool,
    /// Subgroup whose bound first exceeded `alpha`, if the scan hit a violation.
    pub binding_subgroup: Option<SubgroupId>,
    pub alpha: f64,
    pub delta: f64,
    pub grid: GridConfig,
    pub subgroups: Vec<SubgroupId>,
    pub n: Vec<usize>,
    pub trace: Vec<TracePoint>,
}

impl CalibrationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-sample loss evaluator for one calibration set.
enum PreparedSet<'s, 'a> {
    Fast {
        /// Sorted critical scalings of masked voxels, one vector per sample.
        critical: Vec<Vec<f64>>,
        divisors: Vec<f64>,
    },
    Reference {
        set: &'s CalibrationSet<'a>,
        denominator: LossDenominator,
    },
}

impl<'s, 'a> PreparedSet<'s, 'a> {
    fn new(set: &'s CalibrationSet<'a>, opts: &CalibrationOptions) -> Self {
        match opts.engine {
            LossEngine::Reference => PreparedSet::Reference {
                set,
                denominator: opts.denominator,
            },
            LossEngine::Fast => {
                let prepared = opts.execution.map_slice(set.entries(), |e| {
                    let mut critical: Vec<f64> = e
                        .prediction
                        .point()
                        .values()
                        .iter()
                        .zip(e.prediction.lower_offset().values())
                        .zip(e.prediction.upper_offset().values())
                        .zip(e.dose.values())
                        .zip(e.mask.membership())
                        .filter(|(_, &m)| m)
                        .map(|((((&p, &l), &u), &y), _)| voxel_critical(p, l, u, y))
                        .collect();
                    critical.sort_by(f64::total_cmp);
                    (critical, opts.denominator.divisor(e.mask) as f64)
                });
                let (critical, divisors) = prepared.into_iter().unzip();
                PreparedSet::Fast { critical, divisors }
            }
        }
    }

    fn losses(&self, lambda: f64) -> Result<Vec<f64>> {
        match self {
            PreparedSet::Fast { critical, divisors } => Ok(critical
                .iter()
                .zip(divisors)
                .map(|(crit, &div)| {
                    let covered = crit.partition_point(|&c| c <= lambda);
                    (crit.len() - covered) as f64 / div
                })
                .collect()),
            PreparedSet::Reference { set, denominator } => set
                .entries()
                .iter()
                .map(|e| {
                    let interval = build_interval(e.prediction, lambda)?;
                    let (misses, _) = count_misses(&interval, e.dose, e.mask)?;
                    Ok(misses as f64 / denominator.divisor(e.mask) as f64)
                })
                .collect(),
        }
    }
}

/// Per-sample losses of one calibration set at a fixed `lambda`.
pub fn sample_losses(set: &CalibrationSet<'_>, lambda: f64, opts: &CalibrationOptions) -> Result<Vec<f64>> {
    PreparedSet::new(set, opts).losses(lambda)
}

fn check_inputs(sets: &[CalibrationSet<'_>], alpha: f64, delta: f64, grid: &GridConfig) -> Result<Vec<f64>> {
    check_open_unit("alpha", alpha)?;
    check_open_unit("delta", delta)?;
    grid.validate()?;
    if sets.is_empty() {
        return Err(Error::Config("calibration needs at least one subgroup".into()));
    }
    sets.iter()
        .map(|set| {
            let penalty = hoeffding_penalty(set.n(), delta);
            if penalty >= alpha {
                Err(Error::IrreduciblePenalty {
                    subgroup: set.subgroup().0,
                    n: set.n(),
                    penalty,
                    alpha,
                    min_n: min_samples_for(alpha, delta),
                })
            } else {
                Ok(penalty)
            }
        })
        .collect()
}

fn result_shell(sets: &[CalibrationSet<'_>], alpha: f64, delta: f64, grid: GridConfig) -> CalibrationResult {
    CalibrationResult {
        lambda_hat: None,
        feasible: false,
        binding_subgroup: None,
        alpha,
        delta,
        grid,
        subgroups: sets.iter().map(|s| s.subgroup()).collect(),
        n: sets.iter().map(|s| s.n()).collect(),
        trace: Vec::new(),
    }
}

pub fn rcps_calibrate(cal: &CalibrationSet<'_>, alpha: f64, delta: f64, grid: GridConfig) -> Result<CalibrationResult> {
    rcps_calibrate_with(cal, alpha, delta, grid, &CalibrationOptions::default())
}

/// Smallest grid `lambda` whose upper confidence bound stays at or below `alpha`,
/// found by scanning down from `lambda_max` and stopping at the first violation.
pub fn rcps_calibrate_with(
    cal: &CalibrationSet<'_>,
    alpha: f64,
    delta: f64,
    grid: GridConfig,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let penalty = check_inputs(std::slice::from_ref(cal), alpha, delta, &grid)?[0];
    let prepared = PreparedSet::new(cal, opts);
    let mut result = result_shell(std::slice::from_ref(cal), alpha, delta, grid);

    let mut accepted: Option<f64> = None;
    for lambda in grid.points() {
        let ucb = ucb_unchecked(&prepared.losses(lambda)?, penalty);
        result.trace.push(TracePoint { lambda, ucb: vec![ucb] });
        if ucb > alpha {
            result.binding_subgroup = Some(cal.subgroup());
            break;
        }
        accepted = Some(lambda);
    }
    result.feasible = accepted.is_some();
    result.lambda_hat = accepted;
    Ok(result)
}

pub fn sg_rcps_calibrate(
    cals: &[CalibrationSet<'_>],
    alpha: f64,
    delta: f64,
    grid: GridConfig,
) -> Result<CalibrationResult> {
    sg_rcps_calibrate_with(cals, alpha, delta, grid, &CalibrationOptions::default())
}

/// Subgroup-aware search: one shared `lambda`, shrunk while every subgroup's
/// bound stays at or below `alpha`.
///
/// All bounds are evaluated at `lambda_max` before the loop; if any already
/// exceeds `alpha` the result is infeasible and names that subgroup. The scan
/// never goes below the smallest positive grid point.
pub fn sg_rcps_calibrate_with(
    cals: &[CalibrationSet<'_>],
    alpha: f64,
    delta: f64,
    grid: GridConfig,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let penalties = check_inputs(cals, alpha, delta, &grid)?;
    let prepared: Vec<PreparedSet<'_, '_>> = cals.iter().map(|c| PreparedSet::new(c, opts)).collect();
    let mut result = result_shell(cals, alpha, delta, grid);

    let bounds_at = |lambda: f64| -> Result<Vec<f64>> {
        prepared
            .iter()
            .zip(&penalties)
            .map(|(p, &pen)| Ok(ucb_unchecked(&p.losses(lambda)?, pen)))
            .collect()
    };
    let first_violation = |ucb: &[f64]| ucb.iter().position(|&u| u > alpha);

    let points = grid.points();
    let mut k = 0;
    let mut ucb = bounds_at(points[k])?;
    result.trace.push(TracePoint {
        lambda: points[k],
        ucb: ucb.clone(),
    });
    if let Some(z) = first_violation(&ucb) {
        result.binding_subgroup = Some(cals[z].subgroup());
        return Ok(result);
    }

    while first_violation(&ucb).is_none() {
        k += 1;
        if k == points.len() {
            break;
        }
        ucb = bounds_at(points[k])?;
        result.trace.push(TracePoint {
            lambda: points[k],
            ucb: ucb.clone(),
        });
    }
    if let Some(z) = first_violation(&ucb) {
        result.binding_subgroup = Some(cals[z].subgroup());
    }
    result.lambda_hat = Some(points[k - 1]);
    result.feasible = true;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn pred_with_residuals(residuals: &[f64]) -> (HeuristicPrediction, VoxelVolume) {
        let n = residuals.len();
        let pred = HeuristicPrediction::new(
            VoxelVolume::from_slice(&vec![0.0; n]).unwrap(),
            VoxelVolume::from_slice(&vec![1.0; n]).unwrap(),
            VoxelVolume::from_slice(&vec![1.0; n]).unwrap(),
        )
        .unwrap();
        (pred, VoxelVolume::from_slice(residuals).unwrap())
    }

    /// Independent oracle: exhaustive scan over every grid point, keeping the
    /// smallest lambda such that it and all larger grid points are acceptable.
    fn oracle_lambda(
        samples: &[(HeuristicPrediction, VoxelVolume)],
        alpha: f64,
        delta: f64,
        grid: GridConfig,
    ) -> Option<f64> {
        let n = samples.len() as f64;
        let penalty = ((1.0 / delta).ln() / (2.0 * n)).sqrt();
        let steps = (grid.lambda_max / grid.d_lambda).round() as i64;
        let mut best = None;
        for k in 0..steps {
            let lambda = grid.lambda_max - k as f64 * grid.d_lambda;
            let mut total = 0.0;
            for (pred, dose) in samples {
                let mut miss = 0;
                for i in 0..dose.len() {
                    let p = pred.point().values()[i];
                    let lo = p - lambda * pred.lower_offset().values()[i];
                    let hi = p + lambda * pred.upper_offset().values()[i];
                    let y = dose.values()[i];
                    if y < lo || y > hi {
                        miss += 1;
                    }
                }
                total += miss as f64 / dose.len() as f64;
            }
            if total / n + penalty <= alpha {
                best = Some(lambda);
            } else {
                break;
            }
        }
        best
    }

    #[test]
    fn grid_points() {
        let g = GridConfig::new(1.0, 0.05).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 20);
        assert_eq!(pts[0], 1.0);
        assert!((pts[19] - 0.05).abs() < 1e-15);
        assert!(pts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(GridConfig::default().points().len(), 1000);
        assert!(GridConfig::new(0.01, 0.01).is_err());
        assert!(GridConfig::new(1.0, 0.0).is_err());
    }

    #[test]
    fn two_sample_example() {
        let samples = [pred_with_residuals(&[0.1, 0.3]), pred_with_residuals(&[0.2, 0.5])];
        let masks: Vec<SubgroupMask> = samples
            .iter()
            .map(|(p, _)| SubgroupMask::full(p.dims(), SubgroupId::COMBINED))
            .collect();
        let entries = samples
            .iter()
            .zip(&masks)
            .map(|((prediction, dose), mask)| CalibrationEntry { prediction, dose, mask })
            .collect();
        let set = CalibrationSet::new(SubgroupId::COMBINED, entries).unwrap();
        let grid = GridConfig::new(1.0, 0.05).unwrap();
        let result = rcps_calibrate(&set, 0.5, 0.6, grid).unwrap();
        assert!(result.feasible);
        assert_eq!(result.lambda_hat, Some(0.5));
        assert_eq!(oracle_lambda(&samples, 0.5, 0.6, grid), Some(0.5));
        assert_eq!(result.binding_subgroup, Some(SubgroupId::COMBINED));
        // The scan stopped one step below the answer.
        let last = result.trace.last().unwrap();
        assert!(last.lambda < 0.5 && last.ucb[0] > 0.5);

        let reference = rcps_calibrate_with(
            &set,
            0.5,
            0.6,
            grid,
            &CalibrationOptions {
                engine: LossEngine::Reference,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(reference, result);
    }

    #[test]
    fn zero_residuals_reach_smallest_grid_point() {
        let samples: Vec<_> = (0..200).map(|_| pred_with_residuals(&[0.0, 0.0, 0.0])).collect();
        let masks: Vec<SubgroupMask> = samples
            .iter()
            .map(|(p, _)| SubgroupMask::full(p.dims(), SubgroupId::COMBINED))
            .collect();
        let entries = samples
            .iter()
            .zip(&masks)
            .map(|((prediction, dose), mask)| CalibrationEntry { prediction, dose, mask })
            .collect();
        let set = CalibrationSet::new(SubgroupId::COMBINED, entries).unwrap();
        let grid = GridConfig::default();
        let smallest = *grid.points().last().unwrap();
        let result = rcps_calibrate(&set, 0.1, 0.1, grid).unwrap();
        assert_eq!(result.lambda_hat, Some(smallest));
        assert_eq!(result.binding_subgroup, None);
        let sg = sg_rcps_calibrate(std::slice::from_ref(&set), 0.1, 0.1, grid).unwrap();
        assert_eq!(sg, result);
    }

    #[test]
    fn irreducible_penalty() {
        let samples = [pred_with_residuals(&[0.0]), pred_with_residuals(&[0.0])];
        let masks: Vec<SubgroupMask> = samples
            .iter()
            .map(|(p, _)| SubgroupMask::full(p.dims(), SubgroupId::COMBINED))
            .collect();
        let entries = samples
            .iter()
            .zip(&masks)
            .map(|((prediction, dose), mask)| CalibrationEntry { prediction, dose, mask })
            .collect();
        let set = CalibrationSet::new(SubgroupId::COMBINED, entries).unwrap();
        match rcps_calibrate(&set, 0.1, 0.1, GridConfig::default()) {
            Err(Error::IrreduciblePenalty { n, penalty, min_n, .. }) => {
                assert_eq!(n, 2);
                assert!((penalty - 0.758_713_564_692_573_2).abs() < 1e-12);
                assert_eq!(min_n, 116);
            }
            other => panic!("expected irreducible penalty, got {other:?}"),
        }
    }

    #[test]
    fn infeasible_at_lambda_max_is_flagged() {
        let samples = [pred_with_residuals(&[5.0]), pred_with_residuals(&[5.0])];
        let masks: Vec<SubgroupMask> = samples
            .iter()
            .map(|(p, _)| SubgroupMask::full(p.dims(), SubgroupId::COMBINED))
            .collect();
        let entries = samples
            .iter()
            .zip(&masks)
            .map(|((prediction, dose), mask)| CalibrationEntry { prediction, dose, mask })
            .collect();
        let set = CalibrationSet::new(SubgroupId::COMBINED, entries).unwrap();
        let grid = GridConfig::new(1.0, 0.1).unwrap();
        let r = rcps_calibrate(&set, 0.9, 0.9, grid).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.lambda_hat, None);
        assert_eq!(r.trace.len(), 1);
        let sg = sg_rcps_calibrate(std::slice::from_ref(&set), 0.9, 0.9, grid).unwrap();
        assert_eq!(sg, r);
    }

    #[test]
    fn empty_masks_are_dropped() {
        let (pred, dose) = pred_with_residuals(&[0.0, 0.0]);
        let dims = Dims::new(2, 1, 1).unwrap();
        let empty = SubgroupMask::new(dims, vec![false, false], SubgroupId::FOREGROUND).unwrap();
        let some = SubgroupMask::new(dims, vec![true, false], SubgroupId::FOREGROUND).unwrap();
        let set = CalibrationSet::new(
            SubgroupId::FOREGROUND,
            vec![
                CalibrationEntry {
                    prediction: &pred,
                    dose: &dose,
                    mask: &empty,
                },
                CalibrationEntry {
                    prediction: &pred,
                    dose: &dose,
                    mask: &some,
                },
            ],
        )
        .unwrap();
        assert_eq!(set.n(), 1);
        assert!(matches!(
            CalibrationSet::new(
                SubgroupId::FOREGROUND,
                vec![CalibrationEntry {
                    prediction: &pred,
                    dose: &dose,
                    mask: &empty
                }]
            ),
            Err(Error::EmptyCalibrationSet { subgroup: 1 })
        ));
    }

    #[test]
    fn result_json_shape() {
        let samples = [pred_with_residuals(&[0.1, 0.3]), pred_with_residuals(&[0.2, 0.5])];
        let masks: Vec<SubgroupMask> = samples
            .iter()
            .map(|(p, _)| SubgroupMask::full(p.dims(), SubgroupId::COMBINED))
            .collect();
        let entries = samples
            .iter()
            .zip(&masks)
            .map(|((prediction, dose), mask)| CalibrationEntry { prediction, dose, mask })
            .collect();
        let set = CalibrationSet::new(SubgroupId::COMBINED, entries).unwrap();
        let r = rcps_calibrate(&set, 0.5, 0.6, GridConfig::new(1.0, 0.05).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in [
            "lambda_hat",
            "feasible",
            "binding_subgroup",
            "alpha",
            "delta",
            "grid",
            "trace",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["grid"]["lambda_max"], 1.0);
        assert_eq!(v["binding_subgroup"], "all");
        assert!(v["trace"][0]["ucb"].is_array());
        let back: CalibrationResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
