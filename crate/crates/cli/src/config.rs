//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use seqtransfer::trainer::Hyperparams;
use seqtransfer::{Error, Result};

/// Hyperparameters, file paths and the worker count for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hyper: Hyperparams,
    pub threads: usize,
    pub source_train: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_dev: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub source_scheme: Option<PathBuf>,
    pub target_scheme: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub record_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: Hyperparams::default(),
            threads: 1,
            source_train: None,
            target_train: None,
            target_dev: None,
            target_test: None,
            embeddings: None,
            source_scheme: None,
            target_scheme: None,
            label_map: None,
            model_out: None,
            record_out: None,
        }
    }
}

pub const PATH_KEYS: [&str; 10] = [
    "source_train",
    "target_train",
    "target_dev",
    "target_test",
    "embeddings",
    "source_scheme",
    "target_scheme",
    "label_map",
    "model_out",
    "record_out",
];

/// Splits config text into `(line, key, value)` triples.
///
/// Blank lines and lines starting with `#` are skipped; everything else must be `key = value`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "threads" => {
                self.threads =
                    value.parse().ok().filter(|&t: &usize| t > 0).ok_or_else(|| {
                        Error::Config(format!("`threads`: expected a positive integer, got `{value}`"))
                    })?
            }
            "source_train" => self.source_train = path(),
            "target_train" => self.target_train = path(),
            "target_dev" => self.target_dev = path(),
            "target_test" => self.target_test = path(),
            "embeddings" => self.embeddings = path(),
            "source_scheme" => self.source_scheme = path(),
            "target_scheme" => self.target_scheme = path(),
            "label_map" => self.label_map = path(),
            "model_out" => self.model_out = path(),
            "record_out" => self.record_out = path(),
            k => self.hyper.set(k, value)?,
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Checks that required paths are set and exist. Returns warnings for
    /// settings the run will ignore.
    pub fn validate_for_training(&self, uses_source: bool) -> Result<Vec<String>> {
        self.hyper.validate()?;
        let mut warnings = Vec::new();
        let mut required = vec![("target_train", &self.target_train), ("target_dev", &self.target_dev)];
        if uses_source {
            required.push(("source_train", &self.source_train));
        } else if self.source_train.is_some() {
            warnings.push(format!("mode {} ignores source_train", self.hyper.mode));
        }
        for (key, p) in required {
            if p.is_none() {
                return Err(Error::Config(format!("`{key}` is required")));
            }
        }
        if self.model_out.is_none() {
            return Err(Error::Config("`model_out` is required".into()));
        }
        let existing = [
            &self.source_train,
            &self.target_train,
            &self.target_dev,
            &self.target_test,
            &self.embeddings,
            &self.source_scheme,
            &self.target_scheme,
            &self.label_map,
        ];
        for p in existing.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Io {
                    path: p.display().to_string(),
                    msg: "no such file".into(),
                });
            }
        }
        Ok(warnings)
    }
}
