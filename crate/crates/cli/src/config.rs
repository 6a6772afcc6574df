//! Run configuration files: UTF-8 lines of `key = value`, `#` starts a
//! comment, blank lines are ignored, and unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use rnnsearch::train::TrainConfig;
use rnnsearch::{ContextMode, Precision};

use crate::error::{io_error, CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub n_align: usize,
    /// Shortlist size per side, reserved symbols excluded.
    pub vocab_size: usize,
    pub batch: usize,
    pub bucket: usize,
    pub clip: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub epochs: usize,
    pub max_updates: Option<usize>,
    pub dev_every: Option<usize>,
    /// Pairs with a longer side are dropped before training.
    pub max_len: usize,
    pub beam: usize,
    pub precision: Precision,
    pub mode: ContextMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 1000,
            m: 620,
            l: 500,
            n_align: 1000,
            vocab_size: 30000,
            batch: 80,
            bucket: 1600,
            clip: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
            seed: 1234,
            epochs: 1,
            max_updates: None,
            dev_every: None,
            max_len: 50,
            beam: 12,
            precision: Precision::F32,
            mode: ContextMode::Attention,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("line {line}: invalid value {value:?} for {key}")))
}

fn positive(key: &str, v: usize, line: usize) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::Usage(format!("line {line}: {key} must be >= 1")));
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse_str(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {line}: expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("line {line}: duplicate key {key}")));
            }
            match key {
                "n" => cfg.n = positive(key, parse(key, value, line)?, line)?,
                "m" => cfg.m = positive(key, parse(key, value, line)?, line)?,
                "l" => cfg.l = positive(key, parse(key, value, line)?, line)?,
                "n_align" => cfg.n_align = positive(key, parse(key, value, line)?, line)?,
                "vocab_size" => cfg.vocab_size = positive(key, parse(key, value, line)?, line)?,
                "batch" => cfg.batch = positive(key, parse(key, value, line)?, line)?,
                "bucket" => cfg.bucket = positive(key, parse(key, value, line)?, line)?,
                "clip" => cfg.clip = parse(key, value, line)?,
                "rho" => cfg.rho = parse(key, value, line)?,
                "epsilon" => cfg.epsilon = parse(key, value, line)?,
                "seed" => cfg.seed = parse(key, value, line)?,
                "epochs" => cfg.epochs = positive(key, parse(key, value, line)?, line)?,
                "max_updates" => cfg.max_updates = Some(parse(key, value, line)?),
                "dev_every" => cfg.dev_every = Some(positive(key, parse(key, value, line)?, line)?),
                "max_len" => cfg.max_len = positive(key, parse(key, value, line)?, line)?,
                "beam" => cfg.beam = positive(key, parse(key, value, line)?, line)?,
                "precision" => {
                    cfg.precision = match value {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "line {line}: precision must be f32 or f64, got {value:?}"
                            )))
                        }
                    }
                }
                "mode" => {
                    cfg.mode = value
                        .parse()
                        .map_err(|e: rnnsearch::Error| CliError::Usage(format!("line {line}: {e}")))?
                }
                other => return Err(CliError::Usage(format!("line {line}: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(CliError::Usage(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::Usage(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            bucket: self.bucket,
            clip: self.clip,
            rho: self.rho,
            epsilon: self.epsilon,
            epochs: self.epochs,
            max_updates: self.max_updates,
            dev_every: self.dev_every,
        }
    }
}

/// Reads a text file, reporting failures as data errors.
pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}
