use cssasim_core::sim::log::LogKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{cssa_sim, environment, ratio, Outcome, ScenarioError};
use crate::config::{Params, ScenarioConfig};
use crate::driver::{Driver, DriverOptions};
use crate::modbus::ModbusOp;
use crate::presets;
use crate::report::MetricsReport;
use crate::traffic::{gen_traffic, TrafficKind, TrafficParams};

#[derive(Debug, Serialize)]
struct ModbusSection {
    operations: u64,
    delivered: u64,
    decoded: u64,
}

/// Supervisory reads and writes toward a field controller with no attack
/// present: every operation arrives intact and nothing alerts.
pub(super) fn run(cfg: &ScenarioConfig, opts: DriverOptions) -> Result<Outcome, ScenarioError> {
    let mut p = Params::new(cfg);
    let masters = p.hosts("masters", &["MTU", "HMI"])?;
    let slave = p.hosts("slave", &["PLC1"])?;
    let rate = p.positive("rate", 20.0)?;
    p.finish()?;

    let inputs = cfg.inputs(presets::MODBUS_POLICIES)?;
    let duration = cfg.duration_or(5.0)?;
    let topo = inputs.topology.clone();
    let mut driver = Driver::new(cssa_sim(topo.clone(), inputs.policies, cfg.seed), opts);
    driver.await_start();
    let t0 = driver.sim().now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ops = TrafficParams::new(masters, slave.clone(), rate, t0, duration);
    let traffic = gen_traffic(TrafficKind::ModbusRw, &ops, &topo, &mut rng)?;
    let sent = traffic.len() as u64;
    driver.run(traffic, t0 + duration)?;
    driver.settle(100_000);

    let sim = driver.sim();
    let delivered = sim.deliveries(&slave[0]);
    let decoded = delivered.iter().filter(|d| ModbusOp::decode(&d.packet.payload).is_ok()).count() as u64;
    let records = sim.log().records();
    let mut report = MetricsReport::new(cfg.name.as_str(), environment(cfg, inputs.config_hash, duration, sim.controller_name()));
    report.absorb_log(records, driver.labels());
    let n = delivered.len() as u64;
    report.check("all_operations_delivered", n == sent, format!("{n}/{sent} delivered ({:.1}%)", ratio(n, sent) * 100.0));
    report.check("payloads_decode", decoded == n, format!("{decoded}/{n} decoded"));
    let alerts = records.iter().filter(|r| r.kind == LogKind::Alert).count();
    report.check("no_alerts", alerts == 0, format!("{alerts} alert notices"));
    report.section("modbus", ModbusSection { operations: sent, delivered: n, decoded });
    Ok(Outcome { report, log: sim.log().to_ndjson() })
}
