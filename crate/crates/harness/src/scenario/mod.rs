//! Scenario runners. Each builds its network, drives traffic through it and
//! scores the run from the event log.

mod flood;
mod legacy_encrypt;
mod modbus_baseline;
mod shellshock;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use cssasim_core::cssa::{CssaApp, CssaConfig, PolicySet};
use cssasim_core::net::{PacketId, SimTime};
use cssasim_core::sim::log::{LogKind, LogRecord};
use cssasim_core::sim::{SimConfig, SimError, Simulation};
use cssasim_core::topology::Topology;

use crate::bench::{self, BenchError};
use crate::config::{ConfigError, ScenarioConfig, ScenarioName};
use crate::driver::DriverOptions;
use crate::report::{Environment, MetricsReport};
use crate::traffic::{Label, TrafficError};

pub use legacy_encrypt::{EncryptionPoint, EncryptionResult};

/// Simulated time given to switch handshakes before traffic starts.
pub const WARMUP_US: u64 = 5_000;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Debug)]
pub struct Outcome {
    pub report: MetricsReport,
    /// NDJSON event log; runs made of several simulations concatenate theirs.
    pub log: String,
}

pub fn run(cfg: &ScenarioConfig, opts: DriverOptions) -> Result<Outcome, ScenarioError> {
    match cfg.name {
        ScenarioName::Flood => flood::run(cfg, opts),
        ScenarioName::Shellshock => shellshock::run(cfg, opts),
        ScenarioName::ModbusBaseline => modbus_baseline::run(cfg, opts),
        ScenarioName::LegacyEncrypt => legacy_encrypt::run(cfg),
        ScenarioName::DpiBench => bench::dpi_scenario(cfg),
        ScenarioName::ThroughputBench => bench::throughput_scenario(cfg),
    }
}

pub fn cssa_sim(topology: Arc<Topology>, policies: PolicySet, seed: u64) -> Simulation {
    let app = CssaApp::new(topology.clone(), policies, CssaConfig { key_seed: seed, ..CssaConfig::default() });
    let mut sim = Simulation::new(topology, seed, Box::new(app), SimConfig::default());
    sim.run_until(SimTime(WARMUP_US));
    sim
}

pub fn environment(cfg: &ScenarioConfig, config_hash: String, duration_us: u64, controller: &str) -> Environment {
    Environment {
        seed: cfg.seed,
        config_hash,
        duration_us,
        controller: controller.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Packet ids carrying `label`.
pub(crate) fn ids_with(labels: &BTreeMap<PacketId, Label>, label: Label) -> BTreeSet<u64> {
    labels.iter().filter(|(_, l)| **l == label).map(|(id, _)| id.0).collect()
}

pub(crate) fn count_kind(records: &[LogRecord], kind: LogKind, ids: &BTreeSet<u64>) -> usize {
    records
        .iter()
        .filter(|r| r.kind == kind && r.get_u64("pkt_id").is_some_and(|id| ids.contains(&id)))
        .count()
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}
