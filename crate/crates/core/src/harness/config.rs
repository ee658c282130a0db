//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{FlowError, Result};

/// Every key the harness understands. Anything else is rejected at parse time.
pub const KNOWN_KEYS: &[&str] = &[
    "task",
    "operator.kind",
    "operator.sigma_y",
    "operator.mask_fraction",
    "operator.rect",
    "operator.factor",
    "operator.blur_kernel",
    "operator.blur_sigma",
    "operator.rate",
    "operator.seed",
    "operator.sign_seed",
    "solver.variant",
    "solver.N",
    "solver.K",
    "solver.eta",
    "solver.lambda",
    "solver.seed",
    "solver.weight",
    "solver.trace_probes",
    "solver.exact_threshold",
    "solver.outer_iters",
    "solver.outer_lr_final",
    "prior.kind",
    "prior.dim",
    "prior.spectrum",
    "prior.min_eig",
    "prior.shift",
    "prior.mean_lo",
    "prior.mean_hi",
    "prior.seed",
    "prior.checkpoint",
    "dataset.kind",
    "dataset.count",
    "dataset.seed",
    "dataset.height",
    "dataset.width",
    "dataset.blobs",
    "dataset.cell",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.lr_final",
    "train.hidden",
    "train.seed",
    "output.dir",
    "output.timing",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FlowError::config(format!("line {}: expected `key = value`, got '{raw}'", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.entries.contains_key(k) {
                return Err(FlowError::config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(FlowError::config(format!("unknown configuration key '{key}'")));
        }
        if value.is_empty() {
            return Err(FlowError::config(format!("key '{key}' has an empty value")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| FlowError::config(format!("missing required key '{key}'")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| FlowError::config(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    /// Comma-separated list of numbers.
    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| FlowError::config(format!("key '{key}': cannot parse '{p}'")))
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn echo(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
