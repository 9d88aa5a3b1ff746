//! CSV and JSON reports. Floats are written with 17 significant digits so a
//! report read back reproduces the recorded values exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::verdict::{clopper_pearson, CONFIDENCE};
use super::{GuaranteeVerdict, Method, MethodOutcome, SubgroupRisk, TrialRecord, SUBGROUPS};
use crate::error::{Error, Result};
use crate::volume::SubgroupId;

const TRIAL_COLUMNS: [&str; 13] = [
    "trial_seed",
    "method",
    "feasible",
    "lambda_hat",
    "binding_subgroup",
    "note",
    "subgroup",
    "risk",
    "misses",
    "voxels",
    "segments",
    "segment_mean_risk",
    "segment_violation_fraction",
];

const SUMMARY_COLUMNS: [&str; 8] = [
    "method",
    "subgroup",
    "trials",
    "mean_risk",
    "violation_rate",
    "ci_lo",
    "ci_hi",
    "lambda_hat_mean",
];

pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value {field:?}")))
}

fn parse_int<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value {field:?}")))
}

fn opt_subgroup(s: Option<SubgroupId>) -> String {
    s.map(|z| z.to_string()).unwrap_or_default()
}

pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRIAL_COLUMNS)?;
    for t in trials {
        let seed = t.trial_seed.to_string();
        for o in &t.outcomes {
            let head = [
                seed.clone(),
                o.method.name().to_owned(),
                o.feasible.to_string(),
                o.lambda_hat.map(fmt_f64).unwrap_or_default(),
                opt_subgroup(o.binding_subgroup),
                o.note.clone().unwrap_or_default(),
            ];
            if o.risks.is_empty() {
                let mut row = head.to_vec();
                row.extend(std::iter::repeat_n(String::new(), 7));
                w.write_record(&row)?;
            }
            for r in &o.risks {
                let mut row = head.to_vec();
                row.extend([
                    r.subgroup.to_string(),
                    fmt_f64(r.risk),
                    r.misses.to_string(),
                    r.voxels.to_string(),
                    r.segments.to_string(),
                    fmt_f64(r.segment_mean_risk),
                    fmt_f64(r.segment_violation_fraction),
                ]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: Read>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(TRIAL_COLUMNS) {
        return Err(Error::Format("unexpected trials.csv header".into()));
    }
    let mut trials: Vec<TrialRecord> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let seed: u64 = parse_int(f(0), "trial_seed")?;
        let method = Method::parse(f(1))?;
        let feasible: bool = parse_int(f(2), "feasible")?;
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_owned());
        let lambda_hat = opt(f(3)).map(|s| parse_f64(&s, "lambda_hat")).transpose()?;
        let binding_subgroup = opt(f(4)).map(|s| SubgroupId::parse(&s)).transpose()?;
        let risk = match opt(f(6)) {
            Some(z) => Some(SubgroupRisk {
                subgroup: SubgroupId::parse(&z)?,
                risk: parse_f64(f(7), "risk")?,
                misses: parse_int(f(8), "misses")?,
                voxels: parse_int(f(9), "voxels")?,
                segments: parse_int(f(10), "segments")?,
                segment_mean_risk: parse_f64(f(11), "segment_mean_risk")?,
                segment_violation_fraction: parse_f64(f(12), "segment_violation_fraction")?,
            }),
            None => None,
        };

        if trials.last().is_none_or(|t| t.trial_seed != seed) {
            trials.push(TrialRecord {
                trial_seed: seed,
                outcomes: Vec::new(),
            });
        }
        let trial = trials.last_mut().expect("pushed above");
        if trial.outcomes.last().is_none_or(|o| o.method != method) {
            trial.outcomes.push(MethodOutcome {
                method,
                feasible,
                lambda_hat,
                binding_subgroup,
                note: opt(f(5)),
                risks: Vec::new(),
            });
        }
        if let Some(risk) = risk {
            trial.outcomes.last_mut().expect("pushed above").risks.push(risk);
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub subgroup: SubgroupId,
    pub trials: usize,
    pub mean_risk: f64,
    pub violation_rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub lambda_hat_mean: f64,
}

/// Per method and subgroup statistics over feasible trials.
pub fn summarize(trials: &[TrialRecord], alpha: f64) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for method in Method::ALL {
        for subgroup in SUBGROUPS {
            let mut risks = Vec::new();
            let mut lambdas = Vec::new();
            for o in trials.iter().filter_map(|t| t.outcome(method)).filter(|o| o.feasible) {
                if let Some(r) = o.risk(subgroup).filter(|r| r.is_finite()) {
                    risks.push(r);
                    lambdas.extend(o.lambda_hat);
                }
            }
            if risks.is_empty() {
                continue;
            }
            let n = risks.len();
            let violations = risks.iter().filter(|&&r| r > alpha).count();
            let (ci_lo, ci_hi) = clopper_pearson(violations, n, CONFIDENCE);
            rows.push(SummaryRow {
                method,
                subgroup,
                trials: n,
                mean_risk: risks.iter().sum::<f64>() / n as f64,
                violation_rate: violations as f64 / n as f64,
                ci_lo,
                ci_hi,
                lambda_hat_mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
            });
        }
    }
    rows
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.name().to_owned(),
            r.subgroup.to_string(),
            r.trials.to_string(),
            fmt_f64(r.mean_risk),
            fmt_f64(r.violation_rate),
            fmt_f64(r.ci_lo),
            fmt_f64(r.ci_hi),
            fmt_f64(r.lambda_hat_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub summary: PathBuf,
    pub trials: PathBuf,
    pub verdict: Option<PathBuf>,
}

/// Writes `summary.csv`, `trials.csv` and, when given, `verdict.json` into `dir`.
pub fn emit_report(
    dir: &Path,
    trials: &[TrialRecord],
    alpha: f64,
    verdict: Option<&GuaranteeVerdict>,
) -> Result<ReportPaths> {
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        summary: dir.join("summary.csv"),
        trials: dir.join("trials.csv"),
        verdict: verdict.map(|_| dir.join("verdict.json")),
    };
    write_summary_csv(&summarize(trials, alpha), fs::File::create(&paths.summary)?)?;
    write_trials_csv(trials, fs::File::create(&paths.trials)?)?;
    if let (Some(v), Some(path)) = (verdict, &paths.verdict) {
        let mut json = serde_json::to_vec_pretty(v)?;
        json.push(b'\n');
        fs::write(path, json)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trials() -> Vec<TrialRecord> {
        let risk = |subgroup, risk: f64| SubgroupRisk {
            subgroup,
            risk,
            misses: 3,
            voxels: 7,
            segments: 2,
            segment_mean_risk: risk / 3.0,
            segment_violation_fraction: 0.5,
        };
        vec![
            TrialRecord {
                trial_seed: u64::MAX,
                outcomes: vec![
                    MethodOutcome {
                        method: Method::Rcps,
                        feasible: true,
                        lambda_hat: Some(0.1 + 0.2),
                        binding_subgroup: None,
                        note: None,
                        risks: SUBGROUPS.iter().map(|&z| risk(z, 1.0 / 3.0)).collect(),
                    },
                    MethodOutcome {
                        method: Method::SgRcps,
                        feasible: false,
                        lambda_hat: None,
                        binding_subgroup: Some(SubgroupId::FOREGROUND),
                        note: Some("infeasible, at lambda_max".into()),
                        risks: vec![],
                    },
                ],
            },
            TrialRecord {
                trial_seed: 7,
                outcomes: vec![MethodOutcome {
                    method: Method::SgRcps,
                    feasible: true,
                    lambda_hat: Some(2.0),
                    binding_subgroup: None,
                    note: None,
                    risks: vec![
                        risk(SubgroupId::BACKGROUND, f64::NAN),
                        risk(SubgroupId::COMBINED, 5e-324),
                    ],
                }],
            },
        ]
    }

    #[test]
    fn trials_roundtrip() {
        let trials = sample_trials();
        let mut buf = Vec::new();
        write_trials_csv(&trials, &mut buf).unwrap();
        let back = read_trials_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], trials[0]);
        assert!(back[1].outcomes[0].risks[0].risk.is_nan());
        assert_eq!(back[1].outcomes[0].risks[1], trials[1].outcomes[0].risks[1]);
        let mut again = Vec::new();
        write_trials_csv(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn summary_skips_infeasible() {
        let rows = summarize(&sample_trials(), 0.1);
        let rcps: Vec<_> = rows.iter().filter(|r| r.method == Method::Rcps).collect();
        assert_eq!(rcps.len(), 3);
        assert!(rcps.iter().all(|r| r.trials == 1 && r.violation_rate == 1.0));
        let sg: Vec<_> = rows.iter().filter(|r| r.method == Method::SgRcps).collect();
        assert_eq!(sg.len(), 1);
        assert_eq!(sg[0].subgroup, SubgroupId::COMBINED);
        assert_eq!(sg[0].lambda_hat_mean, 2.0);
    }
}
