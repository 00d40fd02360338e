//! Versioned TOML configuration shared by the CLI and the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::filter::{FilterConfig, Mode};
use crate::sim::SimConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Monte-Carlo and benchmark settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<Mode>,
    /// Also run every mode with re-linearization enabled.
    pub relin: bool,
    pub first_seed: u64,
    pub seeds: u64,
    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Odometry, Mode::Sm, Mode::Mm, Mode::Mapconst],
            relin: false,
            first_seed: 1,
            seeds: 20,
            bench_sizes: vec![60, 600, 6000],
            bench_repeats: 5,
        }
    }
}

impl EvalConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (self.first_seed..self.first_seed + self.seeds).collect()
    }

    /// `(mode, relin)` pairs to run.
    pub fn configurations(&self) -> Vec<(Mode, bool)> {
        let mut out: Vec<_> = self.modes.iter().map(|m| (*m, false)).collect();
        if self.relin {
            out.extend(self.modes.iter().filter(|m| **m != Mode::Odometry).map(|m| (*m, true)));
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Config {
    pub fn new() -> Self {
        Self { schema_version: SCHEMA_VERSION, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.filter.validate()?;
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes is empty".into()));
        }
        if self.eval.bench_sizes.len() < 2 {
            return Err(Error::Config("eval.bench_sizes needs at least two sizes".into()));
        }
        Ok(())
    }
}
