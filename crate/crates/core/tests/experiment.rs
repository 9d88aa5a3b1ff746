use std::sync::OnceLock;

use risksets::experiment::{
    emit_report, read_trials_csv, run_trial, run_trials, summarize, test_risks, verify_guarantee, ExperimentConfig,
    Method, RetrainConfig, TrialRecord, SUBGROUPS,
};
use risksets::model::{predict_all, train, ModelParams, TrainConfig};
use risksets::synth::{generate_dataset, PhantomConfig};
use risksets::{Dims, Error, Execution, SubgroupId};

fn phantom() -> PhantomConfig {
    PhantomConfig {
        dims: Dims { w: 8, h: 8, d: 4 },
        ..Default::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden: vec![8, 8],
        ..Default::default()
    }
}

fn model() -> &'static ModelParams {
    static MODEL: OnceLock<ModelParams> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = generate_dataset(&phantom(), 0xDA7A, 20).unwrap();
        train(&data, &train_cfg()).unwrap().params
    })
}

fn config() -> ExperimentConfig {
    ExperimentConfig {
        phantom: phantom(),
        n_cal: 120,
        n_test: 10,
        ..Default::default()
    }
}

#[test]
fn inflated_offsets_cover_everything() {
    let cfg = ExperimentConfig {
        offset_inflation: 1000.0,
        ..config()
    };
    let t = run_trial(&cfg, model(), 1, Execution::Sequential).unwrap();
    for o in &t.outcomes {
        assert!(o.feasible);
        assert!(o.lambda_hat.unwrap() <= 0.05, "{:?}", o.lambda_hat);
        for r in &o.risks {
            assert_eq!(r.risk, 0.0, "{} {}", o.method, r.subgroup);
        }
    }
}

#[test]
fn zero_scaling_misses_almost_everything() {
    let cfg = ExperimentConfig {
        forced_lambda: Some(0.0),
        ..config()
    };
    let t = run_trial(&cfg, model(), 2, Execution::Sequential).unwrap();
    for o in &t.outcomes {
        assert_eq!(o.lambda_hat, Some(0.0));
        for r in &o.risks {
            assert!(r.risk > 0.99, "{} {} {}", o.method, r.subgroup, r.risk);
        }
    }
}

#[test]
fn combined_risk_is_voxel_weighted() {
    let t = run_trial(&config(), model(), 3, Execution::Sequential).unwrap();
    for o in t.outcomes.iter().filter(|o| o.feasible) {
        let get = |z| o.risks.iter().find(|r| r.subgroup == z).unwrap();
        let (fg, bg, all) = (
            get(SubgroupId::FOREGROUND),
            get(SubgroupId::BACKGROUND),
            get(SubgroupId::COMBINED),
        );
        assert_eq!(all.misses, fg.misses + bg.misses);
        assert_eq!(all.voxels, fg.voxels + bg.voxels);
        let weighted = (fg.risk * fg.voxels as f64 + bg.risk * bg.voxels as f64) / all.voxels as f64;
        assert!((all.risk - weighted).abs() < 1e-12);
        assert!(o.risks.iter().all(|r| (0.0..=1.0).contains(&r.risk)));
    }
}

#[test]
fn subgroup_risks_share_one_scaling() {
    let cfg = config();
    let t = run_trial(&cfg, model(), 4, Execution::Sequential).unwrap();
    let sg = t.outcome(Method::SgRcps).unwrap();
    // Recompute every subgroup's risk from the single selected scaling.
    let test = generate_dataset(&cfg.phantom, risksets::rng::derive_key(4, 2), cfg.n_test).unwrap();
    let preds = predict_all(model(), &test, Execution::Sequential).unwrap();
    let again = test_risks(&preds, &test, sg.lambda_hat.unwrap(), cfg.alpha).unwrap();
    assert_eq!(again, sg.risks);
}

#[test]
fn trials_are_deterministic_and_order_independent() {
    let cfg = config();
    let seq = run_trials(&cfg, model(), 9, 6, Execution::Sequential).unwrap();
    let par = run_trials(&cfg, model(), 9, 6, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
    let single = run_trial(&cfg, model(), seq[3].trial_seed, Execution::Parallel).unwrap();
    assert_eq!(single, seq[3]);
    let other = run_trials(&cfg, model(), 10, 6, Execution::Sequential).unwrap();
    assert_ne!(seq, other);
}

#[test]
fn subgroup_search_is_never_less_conservative() {
    for t in run_trials(&config(), model(), 21, 8, Execution::Parallel).unwrap() {
        let (rcps, sg) = (t.outcome(Method::Rcps).unwrap(), t.outcome(Method::SgRcps).unwrap());
        if rcps.feasible && sg.feasible {
            assert!(sg.lambda_hat >= rcps.lambda_hat);
        }
    }
}

#[test]
fn small_calibration_sets_are_flagged_infeasible() {
    let cfg = ExperimentConfig { n_cal: 50, ..config() };
    let trials = run_trials(&cfg, model(), 5, 100, Execution::Parallel).unwrap();
    for t in &trials {
        for o in &t.outcomes {
            assert!(!o.feasible);
            assert!(o.note.as_deref().unwrap().contains("116"));
        }
    }
    assert!(matches!(
        verify_guarantee(&trials, 0.1, 0.1),
        Err(Error::InsufficientTrials { got: 0, .. })
    ));
}

#[test]
fn report_rows_and_roundtrip() {
    let trials = run_trials(&config(), model(), 6, 1, Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(dir.path(), &trials, 0.1, None).unwrap();
    let summary = std::fs::read_to_string(&paths.summary).unwrap();
    assert_eq!(summary.lines().count(), 1 + Method::ALL.len() * SUBGROUPS.len());
    assert!(summary.starts_with("method,subgroup,trials,mean_risk,violation_rate,ci_lo,ci_hi,lambda_hat_mean"));
    assert!(paths.verdict.is_none());

    let back = read_trials_csv(std::fs::File::open(&paths.trials).unwrap()).unwrap();
    let close = |a: &TrialRecord, b: &TrialRecord| {
        a.outcomes.iter().zip(&b.outcomes).all(|(x, y)| {
            x.lambda_hat == y.lambda_hat
                && x.risks
                    .iter()
                    .zip(&y.risks)
                    .all(|(r, s)| (r.risk - s.risk).abs() <= 1e-12 && r.misses == s.misses)
        })
    };
    assert!(back.iter().zip(&trials).all(|(a, b)| close(a, b)));
    assert_eq!(back, trials);
    assert_eq!(summarize(&back, 0.1), summarize(&trials, 0.1));
}

#[test]
fn verdict_replays_from_csv() {
    let trials = run_trials(&config(), model(), 7, 100, Execution::Parallel).unwrap();
    let verdict = verify_guarantee(&trials, 0.1, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(dir.path(), &trials, 0.1, Some(&verdict)).unwrap();
    let back = read_trials_csv(std::fs::File::open(&paths.trials).unwrap()).unwrap();
    assert_eq!(verify_guarantee(&back, 0.1, 0.1).unwrap(), verdict);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(paths.verdict.unwrap()).unwrap()).unwrap();
    assert_eq!(json["entries"].as_array().unwrap().len(), 6);
}

#[test]
fn held_out_family_and_retraining_run() {
    let cfg = ExperimentConfig {
        test_phantom: Some(PhantomConfig {
            dims: Dims { w: 8, h: 8, d: 4 },
            ..PhantomConfig::preset("ood").unwrap()
        }),
        retrain: Some(RetrainConfig {
            train: TrainConfig {
                epochs: 1,
                ..train_cfg()
            },
            n_train: 4,
        }),
        ..config()
    };
    let a = run_trial(&cfg, model(), 8, Execution::Sequential).unwrap();
    let b = run_trial(&cfg, model(), 8, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.outcomes.len(), 2);
}
