//! Run configuration in `key = value` form.
//!
//! ```text
//! # comments start with '#'
//! dataset_id = birds
//! schema_dir = schemas
//! manifest = images.tsv
//! cache = answers.jsonl
//! style_csv = style.csv
//! parallelism = 4
//! backend.kind = fixture
//! backend.fixture = answers.tsv
//! ```
//!
//! Relative paths in a file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::style::{StyleClient, StyleError, StyleSource, StyleTable};
use crate::vqa::{BackendConfig, BackendError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value:?}")]
    BadValue { key: String, value: String },
    #[error("missing `{0}`")]
    Missing(&'static str),
    #[error("set exactly one of style_endpoint and style_csv")]
    StyleSource,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_id: Option<String>,
    pub schema_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// `backend.*` keys with the prefix stripped.
    pub backend: BTreeMap<String, String>,
    pub style_endpoint: Option<String>,
    pub style_csv: Option<PathBuf>,
    pub style_timeout_secs: u64,
    /// Questions in flight per image.
    pub parallelism: usize,
    /// Images evaluated concurrently.
    pub workers: usize,
    pub cache: Option<PathBuf>,
    pub seed: u64,
    pub failure_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_id: None,
            schema_dir: None,
            manifest: None,
            backend: BTreeMap::new(),
            style_endpoint: None,
            style_csv: None,
            style_timeout_secs: 30,
            parallelism: DEFAULT_PARALLELISM,
            workers: 1,
            cache: None,
            seed: 0,
            failure_fraction: DEFAULT_FAILURE_FRACTION,
        }
    }
}

const PATH_KEYS: [&str; 5] = ["schema_dir", "manifest", "cache", "style_csv", "backend.fixture"];

impl RunConfig {
    /// Parses config text. `base` anchors relative paths.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            let (k, mut v) = (k.trim(), v.trim().to_string());
            if let (Some(base), true) = (base, PATH_KEYS.contains(&k)) {
                if Path::new(&v).is_relative() {
                    v = base.join(&v).to_string_lossy().into_owned();
                }
            }
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text, path.parent())
    }

    /// Sets one key. Command-line overrides go through here too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        if let Some(sub) = key.strip_prefix("backend.") {
            self.backend.insert(sub.to_string(), value.to_string());
            return Ok(());
        }
        // an empty value unsets an optional key
        let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key {
            "dataset_id" => self.dataset_id = opt(value),
            "schema_dir" => self.schema_dir = opt(value).map(PathBuf::from),
            "manifest" => self.manifest = opt(value).map(PathBuf::from),
            "cache" => self.cache = opt(value).map(PathBuf::from),
            "style_endpoint" => self.style_endpoint = opt(value),
            "style_csv" => self.style_csv = opt(value).map(PathBuf::from),
            "style_timeout_secs" => self.style_timeout_secs = value.parse().map_err(|_| bad())?,
            "parallelism" => self.parallelism = value.parse().ok().filter(|&p| p > 0).ok_or_else(bad)?,
            "workers" => self.workers = value.parse().ok().filter(|&p| p > 0).ok_or_else(bad)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "failure_fraction" => {
                self.failure_fraction = value
                    .parse()
                    .ok()
                    .filter(|f: &f64| (0.0..=1.0).contains(f))
                    .ok_or_else(bad)?
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn backend_config(&self) -> Result<BackendConfig, ConfigError> {
        if self.backend.is_empty() {
            return Err(ConfigError::Missing("backend.kind"));
        }
        Ok(BackendConfig::from_map(&self.backend)?)
    }

    /// The configured style source. With `required`, exactly one of the
    /// endpoint and the CSV must be set; otherwise at most one.
    pub fn style_source(&self, required: bool) -> Result<Option<Box<dyn StyleSource>>, ConfigError> {
        match (&self.style_endpoint, &self.style_csv) {
            (Some(_), Some(_)) => Err(ConfigError::StyleSource),
            (None, None) if required => Err(ConfigError::StyleSource),
            (None, None) => Ok(None),
            (Some(url), None) => Ok(Some(Box::new(StyleClient::new(
                url,
                Duration::from_secs(self.style_timeout_secs),
            )))),
            (None, Some(path)) => Ok(Some(Box::new(StyleTable::load(path)?))),
        }
    }
}
