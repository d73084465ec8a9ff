//! Plain-text `key = value` run configuration.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Every key has a default, so an empty file is a valid
//! configuration. Unknown keys are rejected.

use crate::llm::{ProviderConfig, ProviderKind};
use crate::pipeline::{Task, TrainConfig};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub provider: ProviderConfig,
    /// `None` infers the task from the targets.
    pub task: Option<Task>,
    pub dataset: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn fractions(key: &str, value: &str) -> Result<[f64; 3], ConfigError> {
    let parts: Vec<f64> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: "expected three comma-separated fractions".into(),
    })
}

/// `(key, value)` pairs for every training setting, in file order.
pub fn train_entries(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("d", t.d.to_string()),
        ("lr", t.lr.to_string()),
        ("plateau_patience", t.plateau_patience.to_string()),
        ("lr_factor", t.lr_factor.to_string()),
        ("early_stop_patience", t.early_stop_patience.to_string()),
        ("restore_best", t.restore_best.to_string()),
        ("cheb_order", t.cheb_order.to_string()),
        ("heads", t.heads.to_string()),
        ("head_dim", t.head_dim.to_string()),
        ("set2set_steps", t.set2set_steps.to_string()),
        ("max_tokens", t.max_tokens.to_string()),
        ("icl_k", t.icl_k.to_string()),
        ("icl_strategy", t.icl_strategy.to_string()),
        ("ablations", t.ablations.to_string()),
        ("seed", t.seed.to_string()),
        ("split", t.split.to_string()),
        ("fractions", t.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        ("instruction", t.instruction.clone()),
        ("prompt_budget", t.prompt_budget.to_string()),
        ("max_in_flight", t.max_in_flight.to_string()),
    ]
}

/// Applies one training setting. Returns `Ok(false)` if `key` is not one.
pub fn set_train_key(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "batch_size" => t.batch_size = parse(key, value)?,
        "epochs" => t.epochs = parse(key, value)?,
        "d" => t.d = parse(key, value)?,
        "lr" => t.lr = parse(key, value)?,
        "plateau_patience" => t.plateau_patience = parse(key, value)?,
        "lr_factor" => t.lr_factor = parse(key, value)?,
        "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
        "restore_best" => t.restore_best = parse(key, value)?,
        "cheb_order" => t.cheb_order = parse(key, value)?,
        "heads" => t.heads = parse(key, value)?,
        "head_dim" => t.head_dim = parse(key, value)?,
        "set2set_steps" => t.set2set_steps = parse(key, value)?,
        "max_tokens" => t.max_tokens = parse(key, value)?,
        "icl_k" => t.icl_k = parse(key, value)?,
        "icl_strategy" => t.icl_strategy = parse(key, value)?,
        "ablations" => t.ablations = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "split" => t.split = parse(key, value)?,
        "fractions" => t.fractions = fractions(key, value)?,
        "instruction" => t.instruction = value.to_string(),
        "prompt_budget" => t.prompt_budget = parse(key, value)?,
        "max_in_flight" => t.max_in_flight = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.provider;
        let mut v = vec![
            ("dataset", show_path(&self.dataset)),
            ("cache_dir", show_path(&self.cache_dir)),
            ("archive", show_path(&self.archive)),
            ("output_dir", show_path(&self.output_dir)),
            ("task", self.task.map(|t| t.to_string()).unwrap_or_else(|| "auto".into())),
        ];
        v.extend(train_entries(&self.train));
        v.extend([
            ("provider", p.provider.to_string()),
            ("provider.endpoint", p.endpoint.clone().unwrap_or_default()),
            ("provider.model", p.model.clone()),
            ("provider.api_key_env", p.api_key_env.clone().unwrap_or_default()),
            ("provider.top_p", p.top_p.to_string()),
            ("provider.temperature", p.temperature.to_string()),
            ("provider.max_tokens", p.max_tokens.to_string()),
            ("provider.timeout_secs", p.timeout.as_secs_f64().to_string()),
            ("provider.retries", p.retries.to_string()),
        ]);
        v
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if set_train_key(&mut self.train, key, value)? {
            return Ok(());
        }
        let p = &mut self.provider;
        match key {
            "dataset" => self.dataset = opt_path(value),
            "cache_dir" => self.cache_dir = opt_path(value),
            "archive" => self.archive = opt_path(value),
            "output_dir" => self.output_dir = opt_path(value),
            "task" => self.task = if value == "auto" { None } else { Some(parse(key, value)?) },
            "provider" => p.provider = parse::<ProviderKind>(key, value)?,
            "provider.endpoint" => p.endpoint = (!value.is_empty()).then(|| value.to_string()),
            "provider.model" => p.model = value.to_string(),
            "provider.api_key_env" => p.api_key_env = (!value.is_empty()).then(|| value.to_string()),
            "provider.top_p" => p.top_p = parse(key, value)?,
            "provider.temperature" => p.temperature = parse(key, value)?,
            "provider.max_tokens" => p.max_tokens = parse(key, value)?,
            "provider.timeout_secs" => {
                let secs: f64 = parse(key, value)?;
                p.timeout = Duration::try_from_secs_f64(secs).map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    message: e.to_string(),
                })?;
            }
            "provider.retries" => p.retries = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# molfusion run configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
