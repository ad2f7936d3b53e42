//! Flat `key = value` benchmark configuration.
//!
//! ```text
//! # comments start with '#'
//! mode = flip
//! epsilon = 0.05
//! query_budget = 3000
//! dataset = synthetic
//! num_images = 20
//! ```
//!
//! Attack keys mirror [`AttackConfig`] field names. Every key can also be set
//! from the command line with `--key value`, which wins over the file.

use std::fmt;
use std::path::{Path, PathBuf};

use corrattack_core::attack::{AttackConfig, AttackMode, Selection};
use corrattack_core::oracle::BENCH_SEED;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the source file; `None` for command-line overrides.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Linear,
    Mlp,
}

impl std::str::FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(SyntheticKind::Linear),
            "mlp" => Ok(SyntheticKind::Mlp),
            other => Err(format!("unknown synthetic model {other:?} (linear|mlp)")),
        }
    }
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Seeded uniform-noise images labelled by the target model.
    Synthetic { count: usize, seed: u64 },
    /// PNG directory plus a labels file.
    Directory { dir: PathBuf, labels: PathBuf },
}

/// Which model answers queries.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSource {
    Synthetic { kind: SyntheticKind, seed: u64 },
    Remote { url: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub attack: AttackConfig,
    pub dataset: DatasetSource,
    pub oracle: OracleSource,
    /// Square side images are resized to; `None` keeps sizes, rounding to a
    /// multiple of the initial block when needed.
    pub image_size: Option<usize>,
    pub channels: usize,
    pub workers: usize,
    /// Fill the `wall_ms` CSV column. Off by default so reports are
    /// byte-reproducible.
    pub record_wall_time: bool,
    /// Number of evenly spaced query levels in the success-rate curve.
    pub curve_points: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut attack = AttackConfig::new(AttackMode::Flip);
        attack.query_budget = 10_000;
        Self {
            attack,
            dataset: DatasetSource::Synthetic { count: 20, seed: 0 },
            oracle: OracleSource::Synthetic {
                kind: SyntheticKind::Linear,
                seed: BENCH_SEED,
            },
            image_size: Some(32),
            channels: 3,
            workers: 1,
            record_wall_time: false,
            curve_points: 20,
        }
    }
}

/// Keys accepted in files and as `--key` flags.
pub const KEYS: &[&str] = &[
    "mode",
    "epsilon",
    "eta",
    "initial_block",
    "ei_threshold",
    "sample_ratio",
    "window_ratio",
    "min_samples",
    "min_window",
    "alpha_schedule",
    "query_budget",
    "margin",
    "target",
    "seed",
    "selection",
    "dataset",
    "labels",
    "num_images",
    "dataset_seed",
    "synthetic",
    "model_seed",
    "oracle",
    "image_size",
    "channels",
    "workers",
    "record_wall_time",
    "curve_points",
];

impl BenchConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut config = Self::parse(&text)?;
        // relative dataset paths are relative to the config file
        if let (DatasetSource::Directory { dir, labels }, Some(base)) = (&mut config.dataset, path.parent()) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
            if labels.is_relative() {
                *labels = base.join(&*labels);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut pending_labels: Option<(usize, String)> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    line: Some(line_no),
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "labels" {
                pending_labels = Some((line_no, value.to_string()));
                continue;
            }
            config.set(key, value).map_err(|message| ConfigError {
                line: Some(line_no),
                message,
            })?;
        }
        if let Some((line_no, value)) = pending_labels {
            config.set("labels", &value).map_err(|message| ConfigError {
                line: Some(line_no),
                message,
            })?;
        }
        config.check().map_err(|message| ConfigError { line: None, message })?;
        Ok(config)
    }

    /// Applies `--key value` pairs on top of the current values.
    pub fn apply_overrides<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(), ConfigError> {
        for (key, value) in pairs {
            self.set(key, value).map_err(|message| ConfigError {
                line: None,
                message: format!("--{key}: {message}"),
            })?;
        }
        self.check().map_err(|message| ConfigError { line: None, message })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let a = &mut self.attack;
        match key {
            "mode" => {
                let mode: AttackMode = value.parse().map_err(|e: corrattack_core::Error| e.to_string())?;
                if mode != a.mode {
                    let keep = a.clone();
                    *a = AttackConfig::new(mode);
                    a.epsilon = keep.epsilon;
                    a.eta = keep.eta;
                    a.query_budget = keep.query_budget;
                    a.seed = keep.seed;
                    a.target = keep.target;
                    a.selection = keep.selection;
                    a.margin = keep.margin;
                }
            }
            "epsilon" => a.epsilon = num(value)?,
            "eta" => a.eta = num(value)?,
            "initial_block" => a.initial_block = num(value)?,
            "ei_threshold" => a.ei_threshold = num(value)?,
            "sample_ratio" => a.sample_ratio = num(value)?,
            "window_ratio" => a.window_ratio = num(value)?,
            "min_samples" => a.min_samples = num(value)?,
            "min_window" => a.min_window = num(value)?,
            "alpha_schedule" => {
                // "32:1, 16:1, 8:2"
                let mut schedule = std::collections::BTreeMap::new();
                for pair in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (b, r) = pair
                        .split_once(':')
                        .ok_or_else(|| format!("alpha_schedule entry {pair:?} is not block:radius"))?;
                    schedule.insert(num(b.trim())?, num(r.trim())?);
                }
                if schedule.is_empty() {
                    return Err("alpha_schedule is empty".into());
                }
                a.alpha_schedule = schedule;
            }
            "query_budget" | "budget" => a.query_budget = num(value)?,
            "margin" => a.margin = num(value)?,
            "target" => a.target = if value == "none" { None } else { Some(num(value)?) },
            "seed" => a.seed = num(value)?,
            "selection" => {
                a.selection = match value {
                    "bayes_opt" | "bo" => Selection::BayesOpt,
                    "uniform_random" | "random" => Selection::UniformRandom,
                    other => return Err(format!("unknown selection {other:?} (bayes_opt|uniform_random)")),
                }
            }
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    let (count, seed) = match self.dataset {
                        DatasetSource::Synthetic { count, seed } => (count, seed),
                        _ => (20, 0),
                    };
                    DatasetSource::Synthetic { count, seed }
                } else {
                    let labels = match &self.dataset {
                        DatasetSource::Directory { labels, .. } => labels.clone(),
                        _ => PathBuf::from(value).join("labels.txt"),
                    };
                    DatasetSource::Directory {
                        dir: PathBuf::from(value),
                        labels,
                    }
                }
            }
            "labels" => match &mut self.dataset {
                DatasetSource::Directory { labels, .. } => *labels = PathBuf::from(value),
                DatasetSource::Synthetic { .. } => return Err("labels needs a directory dataset".into()),
            },
            "num_images" => match &mut self.dataset {
                DatasetSource::Synthetic { count, .. } => *count = num(value)?,
                DatasetSource::Directory { .. } => return Err("num_images applies to the synthetic dataset".into()),
            },
            "dataset_seed" => match &mut self.dataset {
                DatasetSource::Synthetic { seed, .. } => *seed = num(value)?,
                DatasetSource::Directory { .. } => return Err("dataset_seed applies to the synthetic dataset".into()),
            },
            "synthetic" => {
                let kind = value.parse()?;
                let seed = match self.oracle {
                    OracleSource::Synthetic { seed, .. } => seed,
                    OracleSource::Remote { .. } => BENCH_SEED,
                };
                self.oracle = OracleSource::Synthetic { kind, seed };
            }
            "model_seed" => match &mut self.oracle {
                OracleSource::Synthetic { seed, .. } => *seed = num(value)?,
                OracleSource::Remote { .. } => return Err("model_seed applies to synthetic oracles".into()),
            },
            "oracle" => {
                self.oracle = OracleSource::Remote {
                    url: value.to_string(),
                }
            }
            "image_size" => self.image_size = if value == "native" { None } else { Some(num(value)?) },
            "channels" => self.channels = num(value)?,
            "workers" => self.workers = num(value)?,
            "record_wall_time" => self.record_wall_time = num(value)?,
            "curve_points" => self.curve_points = num(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    fn check(&self) -> Result<(), String> {
        self.attack.validate().map_err(|e| e.to_string())?;
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return Err("channels must be 1 or 3".into());
        }
        if self.curve_points == 0 {
            return Err("curve_points must be at least 1".into());
        }
        if let Some(size) = self.image_size {
            if size == 0 || size % self.attack.initial_block != 0 {
                return Err(format!(
                    "image_size {size} is not a positive multiple of initial_block {}",
                    self.attack.initial_block
                ));
            }
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("bad value {value:?}: {e}"))
}
