use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use super::{Method, TrialRecord, SUBGROUPS};
use crate::error::{check_open_unit, Error, Result};
use crate::volume::SubgroupId;

/// Feasible trials required per method before a verdict is issued.
pub const MIN_TRIALS: usize = 100;
pub const CONFIDENCE: f64 = 0.95;

/// Exact two-sided binomial interval for `successes` out of `trials`.
pub fn clopper_pearson(successes: usize, trials: usize, confidence: f64) -> (f64, f64) {
    assert!(successes <= trials && trials > 0, "need 0 <= k <= n and n > 0");
    let tail = (1.0 - confidence) / 2.0;
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0).expect("valid beta shape").inverse_cdf(tail)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .expect("valid beta shape")
            .inverse_cdf(1.0 - tail)
    };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupVerdict {
    pub method: Method,
    pub subgroup: SubgroupId,
    pub trials: usize,
    /// Trials whose pooled test risk exceeds `alpha`.
    pub violations: usize,
    pub violation_rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// The data do not contradict `P(risk > alpha) <= delta` at 95%: `ci_lo <= delta`.
    pub pass: bool,
    pub mean_risk: f64,
    /// `mean_risk <= alpha + delta`.
    pub marginal_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeVerdict {
    pub alpha: f64,
    pub delta: f64,
    pub confidence: f64,
    pub total_trials: usize,
    /// Infeasible trial count per method, excluded from the statistics.
    pub infeasible: Vec<(Method, usize)>,
    pub entries: Vec<SubgroupVerdict>,
    /// Every subgroup passes for `sg_rcps`, and the combined group passes for `rcps`.
    pub pass: bool,
}

impl GuaranteeVerdict {
    pub fn entry(&self, method: Method, subgroup: SubgroupId) -> Option<&SubgroupVerdict> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.subgroup == subgroup)
    }
}

pub fn verify_guarantee(trials: &[TrialRecord], alpha: f64, delta: f64) -> Result<GuaranteeVerdict> {
    check_open_unit("alpha", alpha)?;
    check_open_unit("delta", delta)?;
    let mut entries = Vec::new();
    let mut infeasible = Vec::new();
    for method in Method::ALL {
        let outcomes: Vec<_> = trials.iter().filter_map(|t| t.outcome(method)).collect();
        let feasible: Vec<_> = outcomes.iter().filter(|o| o.feasible).collect();
        infeasible.push((method, outcomes.len() - feasible.len()));
        if feasible.len() < MIN_TRIALS {
            return Err(Error::InsufficientTrials {
                method: method.name().into(),
                got: feasible.len(),
                needed: MIN_TRIALS,
            });
        }
        for subgroup in SUBGROUPS {
            let risks: Vec<f64> = feasible
                .iter()
                .filter_map(|o| o.risk(subgroup))
                .filter(|r| r.is_finite())
                .collect();
            if risks.is_empty() {
                continue;
            }
            let n = risks.len();
            let violations = risks.iter().filter(|&&r| r > alpha).count();
            let (ci_lo, ci_hi) = clopper_pearson(violations, n, CONFIDENCE);
            let mean_risk = risks.iter().sum::<f64>() / n as f64;
            entries.push(SubgroupVerdict {
                method,
                subgroup,
                trials: n,
                violations,
                violation_rate: violations as f64 / n as f64,
                ci_lo,
                ci_hi,
                pass: ci_lo <= delta,
                mean_risk,
                marginal_pass: mean_risk <= alpha + delta,
            });
        }
    }
    let pass = entries.iter().all(|e| match e.method {
        Method::SgRcps => e.pass,
        Method::Rcps => e.subgroup != SubgroupId::COMBINED || e.pass,
    });
    Ok(GuaranteeVerdict {
        alpha,
        delta,
        confidence: CONFIDENCE,
        total_trials: trials.len(),
        infeasible,
        entries,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{MethodOutcome, SubgroupRisk};

    fn record(seed: u64, risk: f64) -> TrialRecord {
        let risks = SUBGROUPS
            .iter()
            .map(|&subgroup| SubgroupRisk {
                subgroup,
                risk,
                misses: 0,
                voxels: 1,
                segments: 1,
                segment_mean_risk: risk,
                segment_violation_fraction: 0.0,
            })
            .collect::<Vec<_>>();
        TrialRecord {
            trial_seed: seed,
            outcomes: Method::ALL
                .iter()
                .map(|&method| MethodOutcome {
                    method,
                    feasible: true,
                    lambda_hat: Some(1.0),
                    binding_subgroup: None,
                    note: None,
                    risks: risks.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn clopper_pearson_reference_values() {
        // scipy.stats.beta.ppf(0.025, 38, 463), beta.ppf(0.975, 39, 462)
        let (lo, hi) = clopper_pearson(38, 500, 0.95);
        assert!((lo - 0.054_340_781_243_911_666).abs() < 1e-9, "{lo}");
        assert!((hi - 0.102_825_582_113_499_61).abs() < 1e-9, "{hi}");
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
        // Zero successes: upper bound is 1 - 0.025^(1/n).
        let (_, hi) = clopper_pearson(0, 100, 0.95);
        assert!((hi - (1.0 - 0.025f64.powf(0.01))).abs() < 1e-9);
    }

    #[test]
    fn all_zero_risk_passes() {
        let trials: Vec<_> = (0..120).map(|i| record(i, 0.0)).collect();
        let v = verify_guarantee(&trials, 0.1, 0.1).unwrap();
        assert!(v.pass);
        assert!(v
            .entries
            .iter()
            .all(|e| e.violation_rate == 0.0 && e.pass && e.marginal_pass));
    }

    #[test]
    fn all_one_risk_fails() {
        let trials: Vec<_> = (0..120).map(|i| record(i, 1.0)).collect();
        let v = verify_guarantee(&trials, 0.1, 0.1).unwrap();
        assert!(!v.pass);
        assert!(v
            .entries
            .iter()
            .all(|e| e.violation_rate == 1.0 && !e.pass && !e.marginal_pass));
    }

    #[test]
    fn rate_near_delta_is_consistent() {
        let trials: Vec<_> = (0..500).map(|i| record(i, if i < 38 { 0.5 } else { 0.0 })).collect();
        let v = verify_guarantee(&trials, 0.1, 0.1).unwrap();
        let e = v.entry(Method::SgRcps, SubgroupId::FOREGROUND).unwrap();
        assert_eq!(e.violations, 38);
        assert!((e.violation_rate - 0.076).abs() < 1e-15);
        assert!(e.pass);
        assert!(v.pass);
    }

    #[test]
    fn too_few_trials() {
        let trials: Vec<_> = (0..99).map(|i| record(i, 0.0)).collect();
        assert!(matches!(
            verify_guarantee(&trials, 0.1, 0.1),
            Err(Error::InsufficientTrials {
                got: 99,
                needed: 100,
                ..
            })
        ));
    }
}
