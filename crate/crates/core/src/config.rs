//! Line-oriented `key=value` configuration files.
//!
//! One setting per line; `#` starts a comment that runs to the end of the
//! line and blank lines are ignored. Keys are shared by the dataset,
//! network, training and evaluation settings and must be unique across
//! them.

use std::path::Path;

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{parse_num, NetConfig};
use crate::train::TrainConfig;

/// Splits configuration text into `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Settings for evaluation and the experiments built on it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Held-out target images per seed.
    pub samples: usize,
    /// Two-object images for the attention specificity check.
    pub pair_samples: usize,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 200,
            pair_samples: 100,
            seeds: vec![0, 1, 2],
            fractions: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.pair_samples == 0 {
            return Err(Error::config("evaluation needs at least one image"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!("annotation fraction {f} is outside (0, 1]")));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eval_samples", self.samples.to_string()),
            ("pair_samples", self.pair_samples.to_string()),
            ("seeds", join(&self.seeds)),
            ("fractions", join(&self.fractions)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "eval_samples" => self.samples = parse_num(value)?,
            "pair_samples" => self.pair_samples = parse_num(value)?,
            "seeds" => self.seeds = parse_list(value)?,
            "fractions" => self.fractions = parse_list(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything a run needs, as read from a configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Applies one setting, routing it to whichever section owns the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = self.data.set(key, value)?
            || self.net.set(key, value)?
            || self.train.set(key, value)?
            || self.eval.set(key, value)?;
        if known {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key {key:?}")))
        }
    }

    /// Defaults overridden by the settings in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, k, v) in parse_key_values(text)? {
            cfg.set(&k, &v).map_err(|e| Error::config(format!("line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_text(&std::fs::read_to_string(path)?)
    }

    /// Uses `seed` for both data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.net.labels < crate::data::NUM_CATEGORIES {
            return Err(Error::config(format!(
                "labels = {} cannot index the {} dataset categories",
                self.net.labels,
                crate::data::NUM_CATEGORIES
            )));
        }
        if self.net.image != [1, self.data.image_size, self.data.image_size] {
            return Err(Error::config(format!(
                "network image {:?} does not match {}x{} dataset images",
                self.net.image, self.data.image_size, self.data.image_size
            )));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.data.entries();
        out.extend(self.net.entries());
        out.extend(self.train.entries());
        out.extend(self.eval.entries());
        out
    }

    /// The configuration as text that [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
