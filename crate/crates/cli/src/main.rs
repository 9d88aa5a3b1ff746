//! `risksets`: generate phantoms, train the quantile model, calibrate interval
//! scalings and run Monte Carlo verification of the risk guarantees.
//!
//! Exit status: 0 success, 1 usage/configuration/contract error, 2 infeasible
//! calibration, 3 failed guarantee verdict under `--strict`. Errors are one
//! line on stderr: `error[<kind>]: <message>`.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "risksets", version, about = "Risk-controlled voxelwise dose intervals")]
struct Cli {
    /// key = value file, applied below command-line flags (keys are flag names).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Gen(GenArgs),
    /// Train the quantile model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Calibrate the interval scaling on a dataset with a trained model.
    Calibrate(CalibrateArgs),
    /// Run repeated calibrate/test trials and judge the guarantees.
    Verify(Box<VerifyArgs>),
    /// Recompute summary and verdict from a per-trial CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct PhantomArgs {
    /// Phantom family: standard, wide or ood.
    #[arg(long)]
    pub family: Option<String>,
    /// Grid size as WxHxD.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub beam_fraction: Option<f64>,
    #[arg(long)]
    pub peak_dose: Option<f64>,
    #[arg(long)]
    pub falloff: Option<f64>,
    #[arg(long)]
    pub attenuation: Option<f64>,
    #[arg(long)]
    pub noise_fg: Option<f64>,
    #[arg(long)]
    pub noise_bg: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub threshold_fraction: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// Largest scaling searched, or `auto` to derive it from the calibration data.
    #[arg(long)]
    pub lambda_max: Option<String>,
    #[arg(long)]
    pub d_lambda: Option<f64>,
    /// Loss normalisation: masked (voxels in the subgroup) or whd (all voxels).
    #[arg(long)]
    pub denominator: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub phantom: PhantomArgs,
    /// Number of phantoms.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// rcps or sg-rcps.
    #[arg(long)]
    pub method: Option<String>,
    /// Subgroups, comma separated (fg, bg, all). rcps takes exactly one.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Write the result here instead of stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub phantom: PhantomArgs,
    /// Family for test segments (default: same as --family).
    #[arg(long)]
    pub test_family: Option<String>,
    /// Pretrained checkpoint; without it a model is trained and saved in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Phantoms used to train the shared model.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Train a fresh model inside every trial.
    #[arg(long)]
    pub retrain: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub n_cal: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the trial pool (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Exit with status 3 when the verdict fails.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, short)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Per-trial CSV written by `verify`.
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long, short)]
    pub out_dir: PathBuf,
}

/// Error reported on stderr as `error[kind]: message`, with its exit status.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
            code: 1,
        }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        Self {
            kind: "infeasible",
            message: message.into(),
            code: 2,
        }
    }
}

impl From<risksets::Error> for CliError {
    fn from(e: risksets::Error) -> Self {
        use risksets::Error as E;
        let code = match e {
            E::IrreduciblePenalty { .. } | E::EmptyCalibrationSet { .. } | E::InsufficientTrials { .. } => 2,
            _ => 1,
        };
        Self {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        risksets::Error::from(e).into()
    }
}

pub enum Outcome {
    Ok,
    VerdictFailed,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    let result = settings::Settings::load(cli.config.as_deref()).and_then(|s| match cli.command {
        Command::Gen(a) => commands::gen(&s, a),
        Command::Train(a) => commands::train(&s, a),
        Command::Calibrate(a) => commands::calibrate(&s, a),
        Command::Verify(a) => commands::verify(&s, *a),
        Command::Report(a) => commands::report(&s, a),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, one_line(&e.message));
            ExitCode::from(e.code)
        }
    }
}
