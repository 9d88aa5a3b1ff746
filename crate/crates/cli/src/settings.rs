//! Parameter resolution: command-line flag, then `--config` file, then
//! environment (seed only), then built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "RISKSETS_SEED";

/// Keys accepted in a config file; the same names as the long flags.
const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "attenuation",
    "batch-size",
    "channels",
    "d-lambda",
    "data",
    "delta",
    "denominator",
    "dims",
    "epochs",
    "falloff",
    "family",
    "groups",
    "hidden",
    "jobs",
    "lambda-max",
    "learning-rate",
    "method",
    "model",
    "momentum",
    "n",
    "n-cal",
    "n-test",
    "n-train",
    "noise-bg",
    "noise-fg",
    "peak-dose",
    "beam-fraction",
    "seed",
    "test-family",
    "threshold-fraction",
    "trials",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    /// `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if file.insert(key.clone(), value.trim().to_owned()).is_some() {
                return Err(CliError::config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(Self { file })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::config(format!("config key {key}: cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get_opt(key, flag)?.unwrap_or(default))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key),
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(seed) = self.get_opt("seed", flag)? {
            return Ok(seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}
