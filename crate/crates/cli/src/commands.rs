use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use risksets::calibration::{rcps_calibrate_with, sg_rcps_calibrate_with, CalibrationOptions, CalibrationSet};
use risksets::experiment::{
    emit_report, read_trials_csv, run_trials, summarize, train_shared_model, verify_guarantee, ExperimentConfig,
    GridSpec, GuaranteeVerdict, Method, RetrainConfig, SummaryRow, MIN_TRIALS,
};
use risksets::model::{load_checkpoint, predict_all, save_checkpoint, train as train_model, Checkpoint, TrainConfig};
use risksets::synth::{generate_dataset_with, read_dataset, write_dataset, Dataset, PhantomConfig, DATASET_VERSION};
use risksets::{Error, Execution, GridConfig, LossDenominator, SubgroupId};

use crate::settings::Settings;
use crate::{
    CalibrateArgs, CliError, GenArgs, GridArgs, Outcome, PhantomArgs, ReportArgs, TrainArgs, TrainingArgs, VerifyArgs,
};

const REPORT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Formats {
    dataset: u32,
    checkpoint: u32,
    report: u32,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    formats: Formats,
    config: &'a C,
}

fn write_manifest<C: Serialize>(path: &Path, command: &'static str, config: &C) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "risksets",
        version: env!("CARGO_PKG_VERSION"),
        command,
        formats: Formats {
            dataset: DATASET_VERSION,
            checkpoint: risksets::model::CHECKPOINT_VERSION,
            report: REPORT_VERSION,
        },
        config,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = OsString::from(path.as_os_str());
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::config(format!("missing required --{flag}")))
}

fn phantom_config(s: &Settings, a: &PhantomArgs, family: &str) -> Result<PhantomConfig, CliError> {
    let mut c = PhantomConfig::preset(family)?;
    if let Some(dims) = s.get_opt::<String>("dims", a.dims.clone())? {
        c.dims = dims.parse()?;
    }
    let fields: [(&str, Option<f64>, &mut f64); 7] = [
        ("beam-fraction", a.beam_fraction, &mut c.beam_fraction),
        ("peak-dose", a.peak_dose, &mut c.peak_dose),
        ("falloff", a.falloff, &mut c.falloff),
        ("attenuation", a.attenuation, &mut c.attenuation),
        ("noise-fg", a.noise_fg, &mut c.noise_fg),
        ("noise-bg", a.noise_bg, &mut c.noise_bg),
        ("threshold-fraction", a.threshold_fraction, &mut c.threshold_fraction),
    ];
    for (key, flag, slot) in fields {
        if let Some(v) = s.get_opt(key, flag)? {
            *slot = v;
        }
    }
    c.channels = s.get("channels", a.channels, c.channels)?;
    c.validate()?;
    Ok(c)
}

fn training_config(s: &Settings, a: &TrainingArgs, alpha: f64, seed: u64) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let hidden = match s.get_opt::<String>("hidden", a.hidden.clone())? {
        Some(h) => h
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::config(format!("--hidden must be comma-separated widths, got {h:?}")))?,
        None => d.hidden.clone(),
    };
    let cfg = TrainConfig {
        alpha,
        learning_rate: s.get("learning-rate", a.learning_rate, d.learning_rate)?,
        momentum: s.get("momentum", a.momentum, d.momentum)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        seed,
        hidden,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn grid_config(s: &Settings, g: &GridArgs) -> Result<(GridSpec, LossDenominator), CliError> {
    let d_lambda = s.get("d-lambda", g.d_lambda, GridConfig::default().d_lambda)?;
    let lambda_max = s.get(
        "lambda-max",
        g.lambda_max.clone(),
        GridConfig::default().lambda_max.to_string(),
    )?;
    let spec = if lambda_max == "auto" {
        GridSpec::Auto { d_lambda }
    } else {
        let v = lambda_max
            .parse()
            .map_err(|_| CliError::config(format!("--lambda-max must be a number or auto, got {lambda_max:?}")))?;
        GridSpec::Fixed(GridConfig::new(v, d_lambda)?)
    };
    let denominator = LossDenominator::parse(&s.get("denominator", g.denominator.clone(), "masked".to_owned())?)?;
    Ok((spec, denominator))
}

fn risk_levels(s: &Settings, alpha: Option<f64>, delta: Option<f64>) -> Result<(f64, f64), CliError> {
    Ok((s.get("alpha", alpha, 0.1)?, s.get("delta", delta, 0.1)?))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::from(e).with_path(path))?;
    Ok(read_dataset(BufReader::new(file))?)
}

impl CliError {
    fn with_path(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

#[derive(Serialize)]
struct GenConfig {
    family: String,
    phantom: PhantomConfig,
    seed: u64,
    n: usize,
}

pub fn gen(s: &Settings, a: GenArgs) -> Result<Outcome, CliError> {
    let family = s.get("family", a.phantom.family.clone(), "standard".to_owned())?;
    let cfg = GenConfig {
        phantom: phantom_config(s, &a.phantom, &family)?,
        family,
        seed: s.seed(a.seed)?,
        n: s.get("n", a.n, 100)?,
    };
    let samples = generate_dataset_with(&cfg.phantom, cfg.seed, cfg.n, Execution::Sequential)?;
    let dataset = Dataset {
        config: cfg.phantom.clone(),
        seed: cfg.seed,
        samples,
    };
    let mut out = BufWriter::new(fs::File::create(&a.out).map_err(|e| CliError::from(e).with_path(&a.out))?);
    write_dataset(&dataset, &mut out)?;
    out.flush()?;
    write_manifest(&sidecar(&a.out), "gen", &cfg)?;
    println!("wrote {} phantoms ({}) to {}", cfg.n, cfg.phantom.dims, a.out.display());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct TrainRun {
    data: PathBuf,
    data_seed: u64,
    samples: usize,
    train: TrainConfig,
}

pub fn train(s: &Settings, a: TrainArgs) -> Result<Outcome, CliError> {
    let data = required(s.get_opt("data", a.data)?, "data")?;
    let alpha = s.get("alpha", a.alpha, 0.1)?;
    let cfg = training_config(s, &a.training, alpha, s.seed(a.seed)?)?;
    let dataset = load_dataset(&data)?;
    let trained = train_model(&dataset.samples, &cfg)?;
    save_checkpoint(&a.out, &Checkpoint::new(&trained.params, &cfg, &trained.loss_trace))?;
    write_manifest(
        &sidecar(&a.out),
        "train",
        &TrainRun {
            data,
            data_seed: dataset.seed,
            samples: dataset.samples.len(),
            train: cfg,
        },
    )?;
    let best = trained.loss_trace[trained.best_epoch];
    println!(
        "trained {} epochs, kept epoch {} (objective {best:.6}); wrote {}",
        trained.loss_trace.len() - 1,
        trained.best_epoch,
        a.out.display()
    );
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct CalibrateRun {
    model: PathBuf,
    data: PathBuf,
    method: Method,
    groups: Vec<SubgroupId>,
    alpha: f64,
    delta: f64,
    grid: GridSpec,
    denominator: LossDenominator,
}

pub fn calibrate(s: &Settings, a: CalibrateArgs) -> Result<Outcome, CliError> {
    let (alpha, delta) = risk_levels(s, a.alpha, a.delta)?;
    let method = Method::parse(&s.get("method", a.method, "sg-rcps".to_owned())?)?;
    let default_groups = match method {
        Method::Rcps => "all",
        Method::SgRcps => "fg,bg,all",
    };
    let groups = s
        .get("groups", a.groups, default_groups.to_owned())?
        .split(',')
        .map(SubgroupId::parse)
        .collect::<Result<Vec<_>, _>>()?;
    if method == Method::Rcps && groups.len() != 1 {
        return Err(CliError::config(
            "rcps calibrates exactly one group; use sg-rcps for several",
        ));
    }
    let (grid, denominator) = grid_config(s, &a.grid)?;
    let run = CalibrateRun {
        model: required(s.get_opt("model", a.model)?, "model")?,
        data: required(s.get_opt("data", a.data)?, "data")?,
        method,
        groups,
        alpha,
        delta,
        grid,
        denominator,
    };

    let model = load_checkpoint(&run.model)
        .map_err(|e| CliError::from(e).with_path(&run.model))?
        .model()?;
    let dataset = load_dataset(&run.data)?;
    let preds = predict_all(&model, &dataset.samples, Execution::Sequential)?;
    let sets = run
        .groups
        .iter()
        .map(|&g| CalibrationSet::from_samples(g, &preds, &dataset.samples))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = CalibrationOptions {
        denominator,
        execution: Execution::Sequential,
        ..Default::default()
    };
    let grid = run.grid.resolve(&sets)?;
    let result = match method {
        Method::Rcps => rcps_calibrate_with(&sets[0], alpha, delta, grid, &opts)?,
        Method::SgRcps => sg_rcps_calibrate_with(&sets, alpha, delta, grid, &opts)?,
    };

    let json = result.to_json()?;
    match &a.out {
        Some(path) => {
            fs::write(path, format!("{json}\n"))?;
            write_manifest(&sidecar(path), "calibrate", &run)?;
        }
        None => println!("{json}"),
    }
    if !result.feasible {
        let binding = result.binding_subgroup.map_or("?".to_owned(), |z| z.to_string());
        return Err(CliError::infeasible(format!(
            "no scaling up to lambda_max = {} keeps every bound at or below alpha = {alpha} (subgroup {binding} fails first)",
            grid.lambda_max
        )));
    }
    if a.out.is_some() {
        println!("lambda_hat = {}", result.lambda_hat.expect("feasible"));
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct VerifyRun {
    seed: u64,
    trials: usize,
    family: String,
    test_family: String,
    experiment: ExperimentConfig,
    model: Option<PathBuf>,
    n_train: usize,
    train: TrainConfig,
    jobs: usize,
}

fn print_summary(rows: &[SummaryRow], verdict: Option<&GuaranteeVerdict>) {
    println!(
        "{:<8} {:<4} {:>6} {:>10} {:>10} {:>17} {:>10}  verdict",
        "method", "grp", "trials", "mean_risk", "viol_rate", "95% ci", "lambda"
    );
    for r in rows {
        let status = verdict
            .and_then(|v| v.entry(r.method, r.subgroup))
            .map(|e| if e.pass { "pass" } else { "FAIL" })
            .unwrap_or("-");
        println!(
            "{:<8} {:<4} {:>6} {:>10.5} {:>10.4} [{:>6.4}, {:>6.4}] {:>10.3}  {status}",
            r.method.name(),
            r.subgroup.to_string(),
            r.trials,
            r.mean_risk,
            r.violation_rate,
            r.ci_lo,
            r.ci_hi,
            r.lambda_hat_mean
        );
    }
    if let Some(v) = verdict {
        for (method, n) in &v.infeasible {
            if *n > 0 {
                println!("{method}: {n} infeasible trials excluded");
            }
        }
        println!("overall: {}", if v.pass { "pass" } else { "FAIL" });
    }
}

/// Verdict over `records`, writing the report either way.
fn judge(
    dir: &Path,
    records: &[risksets::experiment::TrialRecord],
    alpha: f64,
    delta: f64,
    strict: bool,
) -> Result<Outcome, CliError> {
    match verify_guarantee(records, alpha, delta) {
        Ok(v) => {
            emit_report(dir, records, alpha, Some(&v))?;
            print_summary(&summarize(records, alpha), Some(&v));
            Ok(if strict && !v.pass {
                Outcome::VerdictFailed
            } else {
                Outcome::Ok
            })
        }
        Err(e @ Error::InsufficientTrials { .. }) => {
            emit_report(dir, records, alpha, None)?;
            print_summary(&summarize(records, alpha), None);
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn verify(s: &Settings, a: VerifyArgs) -> Result<Outcome, CliError> {
    let seed = s.seed(a.seed)?;
    let (alpha, delta) = risk_levels(s, a.alpha, a.delta)?;
    let family = s.get("family", a.phantom.family.clone(), "standard".to_owned())?;
    let test_family = s.get("test-family", a.test_family.clone(), family.clone())?;
    let phantom = phantom_config(s, &a.phantom, &family)?;
    let test_phantom = (test_family != family)
        .then(|| phantom_config(s, &a.phantom, &test_family))
        .transpose()?;
    let (grid, denominator) = grid_config(s, &a.grid)?;
    let n_train = s.get("n-train", a.n_train, 100)?;
    let train_cfg = training_config(s, &a.training, alpha, seed)?;
    let trials = s.get("trials", a.trials, 500)?;
    if trials < MIN_TRIALS {
        return Err(CliError::config(format!(
            "--trials must be at least {MIN_TRIALS}, got {trials}"
        )));
    }
    let jobs = match s.get_opt("jobs", a.jobs)? {
        Some(0) => return Err(CliError::config("--jobs must be positive")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let experiment = ExperimentConfig {
        phantom: phantom.clone(),
        test_phantom,
        alpha,
        delta,
        grid,
        n_cal: s.get("n-cal", a.n_cal, 50)?,
        n_test: s.get("n-test", a.n_test, 50)?,
        denominator,
        retrain: a.retrain.then(|| RetrainConfig {
            train: train_cfg.clone(),
            n_train,
        }),
        ..Default::default()
    };
    experiment.validate()?;
    let run = VerifyRun {
        seed,
        trials,
        family,
        test_family,
        experiment,
        model: s.get_opt("model", a.model)?,
        n_train,
        train: train_cfg,
        jobs,
    };

    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::from(e).with_path(&a.out_dir))?;
    write_manifest(&a.out_dir.join("manifest.json"), "verify", &run)?;
    let model = match &run.model {
        Some(path) => load_checkpoint(path)
            .map_err(|e| CliError::from(e).with_path(path))?
            .model()?,
        None => {
            let trained = train_shared_model(&phantom, &run.train, seed, n_train)?;
            save_checkpoint(
                &a.out_dir.join("model.json"),
                &Checkpoint::new(&trained.params, &run.train, &trained.loss_trace),
            )?;
            trained.params
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {jobs} workers: {e}")))?;
    let records = pool.install(|| run_trials(&run.experiment, &model, seed, trials, Execution::Parallel))?;
    judge(&a.out_dir, &records, alpha, delta, a.strict)
}

#[derive(Serialize)]
struct ReportRun {
    trials: PathBuf,
    alpha: f64,
    delta: f64,
}

pub fn report(s: &Settings, a: ReportArgs) -> Result<Outcome, CliError> {
    let (alpha, delta) = risk_levels(s, a.alpha, a.delta)?;
    let file = fs::File::open(&a.trials).map_err(|e| CliError::from(e).with_path(&a.trials))?;
    let records = read_trials_csv(BufReader::new(file))?;
    if records.is_empty() {
        return Err(CliError::config(format!("{} holds no trials", a.trials.display())));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::from(e).with_path(&a.out_dir))?;
    write_manifest(
        &a.out_dir.join("manifest.json"),
        "report",
        &ReportRun {
            trials: a.trials.clone(),
            alpha,
            delta,
        },
    )?;
    judge(&a.out_dir, &records, alpha, delta, a.strict)
}
