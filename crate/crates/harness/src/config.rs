//! Scenario configuration and per-scenario parameter validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use cssasim_core::cssa::{load_policies, PolicyError, PolicySet};
use cssasim_core::net::HostId;
use cssasim_core::topology::{Topology, TopologyError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::presets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Flood,
    Shellshock,
    LegacyEncrypt,
    DpiBench,
    ThroughputBench,
    ModbusBaseline,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::Flood,
        ScenarioName::Shellshock,
        ScenarioName::LegacyEncrypt,
        ScenarioName::DpiBench,
        ScenarioName::ThroughputBench,
        ScenarioName::ModbusBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Flood => "flood",
            ScenarioName::Shellshock => "shellshock",
            ScenarioName::LegacyEncrypt => "legacy_encrypt",
            ScenarioName::DpiBench => "dpi_bench",
            ScenarioName::ThroughputBench => "throughput_bench",
            ScenarioName::ModbusBaseline => "modbus_baseline",
        }
    }

    /// Whether the scenario runs on a user-supplied network.
    pub fn uses_files(self) -> bool {
        matches!(self, ScenarioName::Flood | ScenarioName::Shellshock | ScenarioName::ModbusBaseline)
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("{scenario} does not take parameter {param:?}")]
    UnknownParam { scenario: ScenarioName, param: String },
    #[error("parameter {param}={value:?}: {reason}")]
    BadParam { param: String, value: String, reason: String },
    #[error("{scenario} builds its own network; topology and policy files are not accepted")]
    FilesNotAccepted { scenario: ScenarioName },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_file: Option<PathBuf>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub seed: u64,
    /// Simulated run length; `None` takes the scenario default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    /// Isolate alerted hosts automatically instead of waiting for an operator.
    #[serde(default)]
    pub auto_operator: bool,
}

impl ScenarioConfig {
    pub fn new(name: ScenarioName, seed: u64) -> Self {
        ScenarioConfig {
            name,
            topology_file: None,
            policy_file: None,
            params: BTreeMap::new(),
            seed,
            duration_s: None,
            auto_operator: true,
        }
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn duration(mut self, secs: f64) -> Self {
        self.duration_s = Some(secs);
        self
    }

    pub fn duration_or(&self, default_s: f64) -> Result<u64, ConfigError> {
        let s = self.duration_s.unwrap_or(default_s);
        if !(s.is_finite() && s > 0.0 && s <= 3600.0) {
            return Err(ConfigError::Invalid(format!("duration must be in (0, 3600] s, got {s}")));
        }
        Ok((s * 1e6).round() as u64)
    }

    /// Fully resolved inputs: file contents or the built-in defaults.
    pub fn inputs(&self, default_policies: &str) -> Result<Inputs, ConfigError> {
        self.reject_files()?;
        let topology_text = match &self.topology_file {
            Some(p) => read(p)?,
            None => presets::PLANT_TOPOLOGY.to_string(),
        };
        let policy_text = match &self.policy_file {
            Some(p) => read(p)?,
            None => default_policies.to_string(),
        };
        let topology = Arc::new(Topology::from_json(&topology_text)?);
        let policies = load_policies(&policy_text)?;
        let config_hash = self.hash_with(&[&topology_text, &policy_text]);
        Ok(Inputs { topology, policies, config_hash })
    }

    /// Fails when files were given to a scenario that builds its own network.
    pub fn reject_files(&self) -> Result<(), ConfigError> {
        if !self.name.uses_files() && (self.topology_file.is_some() || self.policy_file.is_some()) {
            return Err(ConfigError::FilesNotAccepted { scenario: self.name });
        }
        Ok(())
    }

    /// SHA-256 over the canonical config JSON and the given input texts.
    pub fn hash_with(&self, texts: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        for t in texts {
            h.update((t.len() as u64).to_be_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn read(p: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })
}

pub struct Inputs {
    pub topology: Arc<Topology>,
    pub policies: PolicySet,
    pub config_hash: String,
}

/// Typed reads from the raw parameter map; unknown keys are an error.
pub struct Params<'a> {
    scenario: ScenarioName,
    raw: &'a BTreeMap<String, String>,
    used: BTreeSet<&'static str>,
}

impl<'a> Params<'a> {
    pub fn new(cfg: &'a ScenarioConfig) -> Self {
        Params { scenario: cfg.name, raw: &cfg.params, used: BTreeSet::new() }
    }

    fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadParam { param: key.into(), value: value.into(), reason: reason.into() }
    }

    pub fn get<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.used.insert(key);
        match self.raw.get(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|e: T::Err| Self::bad(key, v, e.to_string())),
        }
    }

    pub fn positive(&mut self, key: &'static str, default: f64) -> Result<f64, ConfigError> {
        let v = self.get(key, default)?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Self::bad(key, &v.to_string(), "must be positive"));
        }
        Ok(v)
    }

    pub fn count(&mut self, key: &'static str, default: usize, min: usize, max: usize) -> Result<usize, ConfigError> {
        let v: usize = self.get(key, default)?;
        if !(min..=max).contains(&v) {
            return Err(Self::bad(key, &v.to_string(), format!("must be in {min}..={max}")));
        }
        Ok(v)
    }

    pub fn hosts(&mut self, key: &'static str, default: &[&str]) -> Result<Vec<HostId>, ConfigError> {
        self.used.insert(key);
        let list: Vec<String> = match self.raw.get(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        };
        if list.is_empty() {
            return Err(Self::bad(key, "", "needs at least one host"));
        }
        Ok(list.into_iter().map(HostId::new).collect())
    }

    /// Comma-separated sizes with optional k/m suffix (powers of 1024).
    pub fn sizes(&mut self, key: &'static str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.used.insert(key);
        let Some(v) = self.raw.get(key) else { return Ok(default.to_vec()) };
        let out = parse_sizes(v).map_err(|e| Self::bad(key, v, e))?;
        if out.is_empty() {
            return Err(Self::bad(key, v, "empty list"));
        }
        Ok(out)
    }

    /// Comma-separated counts, which must be strictly ascending.
    pub fn ascending(&mut self, key: &'static str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        self.used.insert(key);
        let Some(v) = self.raw.get(key) else { return Ok(default.to_vec()) };
        let out: Vec<usize> = v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| Self::bad(key, v, e.to_string()))?;
        if out.is_empty() || out.contains(&0) || out.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Self::bad(key, v, "must be a non-empty ascending list of positive counts"));
        }
        Ok(out)
    }

    /// Fails on any parameter that was never read.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.raw.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(k) => Err(ConfigError::UnknownParam { scenario: self.scenario, param: k.clone() }),
            None => Ok(()),
        }
    }
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            let lower = x.to_ascii_lowercase();
            let (num, mult) = if let Some(n) = lower.strip_suffix('k') {
                (n, 1024)
            } else if let Some(n) = lower.strip_suffix('m') {
                (n, 1024 * 1024)
            } else {
                (lower.as_str(), 1)
            };
            let n: usize = num.parse().map_err(|_| format!("bad size {x:?}"))?;
            if n == 0 {
                return Err(format!("size {x:?} must be positive"));
            }
            Ok(n * mult)
        })
        .collect()
}
