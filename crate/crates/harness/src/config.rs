//! Experiment configuration: JSON on disk, validated and defaulted on load.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gtn_core::nn::TeacherSpec;
use gtn_core::supernet::{ArchitectureSample, SupernetSpec};
use gtn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.to_string(),
    }
}

/// A column of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Student trained on labels only.
    NoKd,
    /// Vanilla teacher, vanilla KD. The Δ baseline.
    VanillaKd,
    /// Vanilla teacher, decoupled KD.
    Dkd,
    /// One specialised teacher per reference student, vanilla KD.
    Sftn,
    /// One generic teacher, vanilla KD.
    Gtn,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::NoKd, Method::VanillaKd, Method::Dkd, Method::Sftn, Method::Gtn];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoKd => "no-kd",
            Method::VanillaKd => "vanilla-kd",
            Method::Dkd => "dkd",
            Method::Sftn => "sftn",
            Method::Gtn => "gtn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected one of no-kd, vanilla-kd, dkd, sftn, gtn)"))
    }
}

/// Layer budgets for the architecture-search protocol. Empty budgets
/// disable the search stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budgets: Vec<usize>,
    pub epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budgets: Vec::new(),
            epochs: 30,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub teacher: TeacherSpec,
    pub supernet: SupernetSpec,
    /// The finite student pool, as candidate indices per supernet layer.
    pub pool: Vec<ArchitectureSample>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Students that get their own SFTN teacher. Defaults to the first
    /// pool entry when `sftn` is requested.
    #[serde(default)]
    pub sftn_references: Vec<ArchitectureSample>,
    /// Teacher training, including the conditioning loss weights.
    #[serde(default)]
    pub teacher_training: TrainConfig,
    /// Student distillation, including the KD loss weights.
    #[serde(default)]
    pub distillation: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    /// Reads, defaults and validates a config file. Relative dataset paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(dir) = path.parent() {
            cfg.dataset.rebase(dir);
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source,
        })?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills derived defaults and puts set-like lists in canonical order.
    pub fn normalize(&mut self) {
        self.methods.sort();
        self.methods.dedup();
        if self.methods.contains(&Method::Sftn) && self.sftn_references.is_empty() {
            if let Some(first) = self.pool.first() {
                self.sftn_references.push(first.clone());
            }
        }
        if !self.methods.contains(&Method::Sftn) {
            self.sftn_references.clear();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        self.teacher.validate().map_err(|e| invalid("teacher", e))?;
        self.supernet.validate().map_err(|e| invalid("supernet", e))?;
        if self.supernet.input != self.teacher.input {
            return Err(invalid("supernet.input", "must match teacher.input"));
        }
        if self.supernet.classes != self.teacher.classes {
            return Err(invalid("supernet.classes", "must match teacher.classes"));
        }
        if let Some(c) = self.dataset.classes() {
            if c != self.teacher.classes {
                return Err(invalid("dataset.classes", format!("{c} differs from teacher.classes {}", self.teacher.classes)));
            }
        }
        if self.pool.is_empty() {
            return Err(invalid("pool", "the student pool is empty"));
        }
        for (i, s) in self.pool.iter().enumerate() {
            self.supernet.check_sample(s).map_err(|e| invalid(format!("pool[{i}]"), e))?;
        }
        for (i, r) in self.sftn_references.iter().enumerate() {
            if !self.pool.contains(r) {
                return Err(invalid(format!("sftn_references[{i}]"), format!("{:?} is not in the pool", r.0)));
            }
        }
        self.teacher_training.validate().map_err(|e| invalid("teacher_training", e))?;
        self.distillation.validate().map_err(|e| invalid("distillation", e))?;
        if self.methods.iter().any(|m| matches!(m, Method::Sftn | Method::Gtn)) {
            let n = self.teacher_training.branches;
            if n > self.supernet.depth() {
                return Err(invalid(
                    "teacher_training.branches",
                    format!("{n} branches exceed supernet depth {}", self.supernet.depth()),
                ));
            }
            // Branches attach after blocks 1..blocks-1.
            if n >= self.teacher.blocks {
                return Err(invalid(
                    "teacher_training.branches",
                    format!("{n} branches need more than {} teacher blocks", self.teacher.blocks),
                ));
            }
        }
        for (i, &b) in self.search.budgets.iter().enumerate() {
            if b == 0 || b > self.supernet.depth() {
                return Err(invalid(format!("search.budgets[{i}]"), format!("{b} outside 1..={}", self.supernet.depth())));
            }
        }
        if self.search.budgets.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("search.budgets", "budgets must be non-increasing"));
        }
        Ok(())
    }

    /// Canonical pretty JSON with every default spelled out.
    pub fn normalized_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }
}
