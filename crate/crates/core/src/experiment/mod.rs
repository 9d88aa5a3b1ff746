//! Monte Carlo harness: repeated calibrate-then-test trials comparing pooled
//! RCPS with the subgroup-aware search, and the statistics over those trials.

mod report;
mod verdict;

pub use report::{
    emit_report, read_trials_csv, summarize, write_summary_csv, write_trials_csv, ReportPaths, SummaryRow,
};
pub use verdict::{clopper_pearson, verify_guarantee, GuaranteeVerdict, SubgroupVerdict, MIN_TRIALS};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    hoeffding_penalty, min_samples_for, rcps_calibrate_with, sg_rcps_calibrate_with, CalibrationOptions,
    CalibrationResult, CalibrationSet, GridConfig,
};
use crate::error::{check_open_unit, Error, Result};
use crate::interval::{build_interval, count_misses, LossDenominator};
use crate::model::{predict_all, train, ModelParams, TrainConfig};
use crate::par::Execution;
use crate::rng::derive_key;
use crate::synth::{generate_dataset_with, PhantomConfig};
use crate::volume::{HeuristicPrediction, Sample, SubgroupId};

/// Subgroups calibrated by the subgroup-aware method, in order.
pub const SUBGROUPS: [SubgroupId; 3] = [SubgroupId::FOREGROUND, SubgroupId::BACKGROUND, SubgroupId::COMBINED];

const CAL_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const RETRAIN_STREAM: u64 = 3;
const TRIAL_DOMAIN: u64 = 0x7419_a15e_ed00_0001;
const TRAIN_DOMAIN: u64 = 0x7419_a15e_ed00_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rcps,
    SgRcps,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Rcps, Method::SgRcps];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rcps => "rcps",
            Method::SgRcps => "sg_rcps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rcps" => Ok(Method::Rcps),
            "sg_rcps" | "sg-rcps" => Ok(Method::SgRcps),
            other => Err(Error::Config(format!(
                "unknown method {other:?}, expected rcps|sg-rcps"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    Fixed(GridConfig),
    /// `lambda_max` from the calibration data's largest finite critical scaling.
    Auto {
        d_lambda: f64,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Fixed(GridConfig::default())
    }
}

impl GridSpec {
    pub fn resolve(&self, sets: &[CalibrationSet<'_>]) -> Result<GridConfig> {
        match *self {
            GridSpec::Fixed(g) => {
                g.validate()?;
                Ok(g)
            }
            GridSpec::Auto { d_lambda } => GridConfig::auto(d_lambda, sets),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Family the calibration segments are drawn from.
    pub phantom: PhantomConfig,
    /// Family for test segments; defaults to `phantom`.
    pub test_phantom: Option<PhantomConfig>,
    pub alpha: f64,
    pub delta: f64,
    pub grid: GridSpec,
    pub n_cal: usize,
    pub n_test: usize,
    pub denominator: LossDenominator,
    /// Multiplies every heuristic offset before calibration (diagnostic).
    pub offset_inflation: f64,
    /// Replaces both calibrated scalings with a fixed value (diagnostic).
    pub forced_lambda: Option<f64>,
    /// Train a fresh model inside every trial instead of using the shared one.
    pub retrain: Option<RetrainConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            test_phantom: None,
            alpha: 0.1,
            delta: 0.1,
            grid: GridSpec::default(),
            n_cal: 50,
            n_test: 50,
            denominator: LossDenominator::Masked,
            offset_inflation: 1.0,
            forced_lambda: None,
            retrain: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_open_unit("alpha", self.alpha)?;
        check_open_unit("delta", self.delta)?;
        self.phantom.validate()?;
        if let Some(t) = &self.test_phantom {
            t.validate()?;
        }
        if self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::Config("n_cal and n_test must be positive".into()));
        }
        if !(self.offset_inflation > 0.0 && self.offset_inflation.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "offset_inflation",
                value: self.offset_inflation,
                reason: "must be positive",
            });
        }
        if let Some(l) = self.forced_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "forced_lambda",
                    value: l,
                    reason: "must be finite and nonnegative",
                });
            }
        }
        if let GridSpec::Fixed(g) = self.grid {
            g.validate()?;
        }
        Ok(())
    }

    fn test_family(&self) -> &PhantomConfig {
        self.test_phantom.as_ref().unwrap_or(&self.phantom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRisk {
    pub subgroup: SubgroupId,
    /// Pooled voxel miscoverage over all test segments: `misses / voxels`.
    pub risk: f64,
    pub misses: u64,
    pub voxels: u64,
    /// Test segments with a nonempty mask for this subgroup.
    pub segments: usize,
    pub segment_mean_risk: f64,
    /// Fraction of segments whose own risk exceeds `alpha`.
    pub segment_violation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub feasible: bool,
    pub lambda_hat: Option<f64>,
    pub binding_subgroup: Option<SubgroupId>,
    /// Why calibration failed, when it did.
    pub note: Option<String>,
    pub risks: Vec<SubgroupRisk>,
}

impl MethodOutcome {
    fn infeasible(method: Method, note: String, binding_subgroup: Option<SubgroupId>) -> Self {
        Self {
            method,
            feasible: false,
            lambda_hat: None,
            binding_subgroup,
            note: Some(note),
            risks: Vec::new(),
        }
    }

    pub fn risk(&self, subgroup: SubgroupId) -> Option<f64> {
        self.risks.iter().find(|r| r.subgroup == subgroup).map(|r| r.risk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_seed: u64,
    pub outcomes: Vec<MethodOutcome>,
}

impl TrialRecord {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// Seed of trial `index` in a run.
pub fn trial_seed(run_seed: u64, index: u64) -> u64 {
    derive_key(run_seed ^ TRIAL_DOMAIN, index)
}

/// Seed for training data, disjoint from every trial stream of the same run seed.
pub fn training_seed(run_seed: u64) -> u64 {
    derive_key(run_seed ^ TRAIN_DOMAIN, 0)
}

fn predictions(
    model: &ModelParams,
    samples: &[Sample],
    inflation: f64,
    execution: Execution,
) -> Result<Vec<HeuristicPrediction>> {
    let preds = predict_all(model, samples, execution)?;
    if inflation == 1.0 {
        return Ok(preds);
    }
    preds.iter().map(|p| p.with_scaled_offsets(inflation)).collect()
}

fn outcome_from(method: Method, result: Result<CalibrationResult>) -> Result<std::result::Result<f64, MethodOutcome>> {
    match result {
        Ok(r) if r.feasible => Ok(Ok(r.lambda_hat.expect("feasible result carries lambda"))),
        Ok(r) => Ok(Err(MethodOutcome::infeasible(
            method,
            "infeasible at lambda_max".into(),
            r.binding_subgroup,
        ))),
        Err(e @ (Error::IrreduciblePenalty { .. } | Error::EmptyCalibrationSet { .. })) => {
            Ok(Err(MethodOutcome::infeasible(method, e.to_string(), None)))
        }
        Err(e) => Err(e),
    }
}

/// Pooled and per-segment test risk of one scaling for every subgroup.
pub fn test_risks(
    predictions: &[HeuristicPrediction],
    samples: &[Sample],
    lambda: f64,
    alpha: f64,
) -> Result<Vec<SubgroupRisk>> {
    let intervals = predictions
        .iter()
        .map(|p| build_interval(p, lambda))
        .collect::<Result<Vec<_>>>()?;
    SUBGROUPS
        .iter()
        .map(|&subgroup| {
            let (mut misses, mut voxels, mut segments) = (0u64, 0u64, 0usize);
            let (mut risk_sum, mut violating) = (0.0, 0usize);
            for (interval, sample) in intervals.iter().zip(samples) {
                let mask = sample
                    .mask(subgroup)
                    .ok_or_else(|| Error::Config(format!("test sample lacks mask {subgroup}")))?;
                if mask.is_empty() {
                    continue;
                }
                let (m, v) = count_misses(interval, &sample.dose, mask)?;
                misses += m as u64;
                voxels += v as u64;
                segments += 1;
                let r = m as f64 / v as f64;
                risk_sum += r;
                if r > alpha {
                    violating += 1;
                }
            }
            let per_segment = |x: f64| if segments > 0 { x / segments as f64 } else { f64::NAN };
            Ok(SubgroupRisk {
                subgroup,
                risk: if voxels > 0 {
                    misses as f64 / voxels as f64
                } else {
                    f64::NAN
                },
                misses,
                voxels,
                segments,
                segment_mean_risk: per_segment(risk_sum),
                segment_violation_fraction: per_segment(violating as f64),
            })
        })
        .collect()
}

/// One calibrate-then-test trial. Deterministic in its inputs; `execution`
/// controls parallelism inside the trial.
pub fn run_trial(cfg: &ExperimentConfig, model: &ModelParams, seed: u64, execution: Execution) -> Result<TrialRecord> {
    cfg.validate()?;
    let penalty = hoeffding_penalty(cfg.n_cal, cfg.delta);
    if penalty >= cfg.alpha && cfg.forced_lambda.is_none() {
        // Every subgroup has at most n_cal samples, so both searches fail identically.
        let err = Error::IrreduciblePenalty {
            subgroup: SubgroupId::COMBINED.0,
            n: cfg.n_cal,
            penalty,
            alpha: cfg.alpha,
            min_n: min_samples_for(cfg.alpha, cfg.delta),
        };
        return Ok(TrialRecord {
            trial_seed: seed,
            outcomes: Method::ALL
                .iter()
                .map(|&m| MethodOutcome::infeasible(m, err.to_string(), None))
                .collect(),
        });
    }

    let retrained;
    let model = match &cfg.retrain {
        Some(rt) => {
            let data = generate_dataset_with(&cfg.phantom, derive_key(seed, RETRAIN_STREAM), rt.n_train, execution)?;
            retrained = train(&data, &rt.train)?.params;
            &retrained
        }
        None => model,
    };

    let cal = generate_dataset_with(&cfg.phantom, derive_key(seed, CAL_STREAM), cfg.n_cal, execution)?;
    let cal_preds = predictions(model, &cal, cfg.offset_inflation, execution)?;
    let opts = CalibrationOptions {
        denominator: cfg.denominator,
        execution,
        ..Default::default()
    };

    let lambdas: Vec<std::result::Result<f64, MethodOutcome>> = match cfg.forced_lambda {
        Some(l) => vec![Ok(l), Ok(l)],
        None => {
            let combined = CalibrationSet::from_samples(SubgroupId::COMBINED, &cal_preds, &cal)?;
            let grid = cfg.grid.resolve(std::slice::from_ref(&combined))?;
            let rcps = outcome_from(
                Method::Rcps,
                rcps_calibrate_with(&combined, cfg.alpha, cfg.delta, grid, &opts),
            )?;
            let sets: Result<Vec<_>> = SUBGROUPS
                .iter()
                .map(|&z| CalibrationSet::from_samples(z, &cal_preds, &cal))
                .collect();
            let sg = match sets {
                Ok(sets) => outcome_from(
                    Method::SgRcps,
                    sg_rcps_calibrate_with(&sets, cfg.alpha, cfg.delta, grid, &opts),
                )?,
                Err(e @ Error::EmptyCalibrationSet { .. }) => {
                    Err(MethodOutcome::infeasible(Method::SgRcps, e.to_string(), None))
                }
                Err(e) => return Err(e),
            };
            vec![rcps, sg]
        }
    };

    let test = generate_dataset_with(cfg.test_family(), derive_key(seed, TEST_STREAM), cfg.n_test, execution)?;
    let test_preds = predictions(model, &test, cfg.offset_inflation, execution)?;

    let outcomes = Method::ALL
        .iter()
        .zip(lambdas)
        .map(|(&method, lambda)| match lambda {
            Ok(l) => Ok(MethodOutcome {
                method,
                feasible: true,
                lambda_hat: Some(l),
                binding_subgroup: None,
                note: None,
                risks: test_risks(&test_preds, &test, l, cfg.alpha)?,
            }),
            Err(outcome) => Ok(outcome),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialRecord {
        trial_seed: seed,
        outcomes,
    })
}

/// Runs `n_trials` independent trials; records come back in trial order.
/// Trials run in parallel under `execution`, each one sequential inside.
pub fn run_trials(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    run_seed: u64,
    n_trials: usize,
    execution: Execution,
) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    execution
        .map_indexed(n_trials, |i| {
            run_trial(cfg, model, trial_seed(run_seed, i as u64), Execution::Sequential)
        })
        .into_iter()
        .collect()
}

/// Trains the shared model on `n_train` phantoms from the run's training stream.
pub fn train_shared_model(
    phantom: &PhantomConfig,
    train_cfg: &TrainConfig,
    run_seed: u64,
    n_train: usize,
) -> Result<crate::model::TrainedModel> {
    let data = generate_dataset_with(phantom, training_seed(run_seed), n_train, Execution::default())?;
    train(&data, train_cfg)
}
