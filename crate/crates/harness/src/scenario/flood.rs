use std::collections::{BTreeMap, BTreeSet};

use cssasim_core::sim::log::{LogKind, LogRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{cssa_sim, environment, ratio, Outcome, ScenarioError};
use crate::config::{Params, ScenarioConfig};
use crate::driver::{Driver, DriverOptions};
use crate::presets;
use crate::report::MetricsReport;
use crate::traffic::{gen_traffic, Label, TrafficError, TrafficKind, TrafficParams};

#[derive(Debug, Serialize)]
struct FloodSection {
    server_capacity: u64,
    attacker_rate: f64,
    /// Distinct new flows reaching the target per window, in window order.
    admitted_per_window: Vec<u64>,
    benign_requested: u64,
    benign_admitted: u64,
    benign_ratio: f64,
}

pub(super) fn run(cfg: &ScenarioConfig, opts: DriverOptions) -> Result<Outcome, ScenarioError> {
    let mut p = Params::new(cfg);
    let attackers = p.hosts("attackers", &["ATK1", "ATK2", "ATK3", "ATK4", "ATK5"])?;
    let attacker_rate = p.positive("attacker_rate", 1000.0)?;
    let benign = p.hosts("benign", &["MTU"])?;
    let benign_rate = p.positive("benign_rate", 8.0)?;
    let target = p.hosts("target", &["WEB"])?;
    let capacity: u64 = p.get("server_capacity", 100)?;
    let window_us: u64 = p.get("window_ms", 1000u64)? * 1000;
    let min_benign = p.positive("min_benign_ratio", 0.95)?;
    p.finish()?;

    let inputs = cfg.inputs(presets::FLOOD_POLICIES)?;
    let duration = cfg.duration_or(10.0)?;
    let topo = inputs.topology.clone();
    if topo.host(&target[0]).is_none() {
        return Err(TrafficError::UnknownHost(target[0].clone()).into());
    }

    let mut driver = Driver::new(cssa_sim(topo.clone(), inputs.policies, cfg.seed), opts);
    driver.await_start();
    let t0 = driver.sim().now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flood = TrafficParams::new(attackers, target.clone(), attacker_rate, t0, duration);
    let mut legit = TrafficParams::new(benign, target.clone(), benign_rate, t0, duration);
    legit.payload_len = 0;
    let mut traffic = gen_traffic(TrafficKind::Flood, &flood, &topo, &mut rng)?;
    traffic.extend(gen_traffic(TrafficKind::Benign, &legit, &topo, &mut rng)?);
    traffic.sort_by_key(|t| t.at);
    driver.run(traffic, t0 + duration)?;
    driver.settle(100_000);

    let sim = driver.sim();
    let records = sim.log().records();
    let windows = admitted_per_window(records, target[0].as_str(), window_us);
    let worst = windows.values().copied().max().unwrap_or(0);

    let benign_ids = super::ids_with(driver.labels(), Label::Benign);
    let benign_requested = benign_ids.len() as u64;
    let benign_admitted = records
        .iter()
        .filter(|r| r.kind == LogKind::Deliver)
        .filter_map(|r| r.get_u64("pkt_id"))
        .filter(|id| benign_ids.contains(id))
        .collect::<BTreeSet<_>>()
        .len() as u64;
    let benign_ratio = ratio(benign_admitted, benign_requested);

    let mut report = MetricsReport::new(cfg.name.as_str(), environment(cfg, inputs.config_hash, duration, sim.controller_name()));
    report.absorb_log(records, driver.labels());
    report.check(
        "target_admitted_within_capacity",
        worst <= capacity,
        format!("max {worst} new flows per window, capacity {capacity}"),
    );
    report.check(
        "benign_admitted",
        benign_ratio >= min_benign,
        format!("{benign_admitted}/{benign_requested} benign flows delivered ({:.1}%)", benign_ratio * 100.0),
    );
    report.section(
        "flood",
        FloodSection {
            server_capacity: capacity,
            attacker_rate,
            admitted_per_window: windows.values().copied().collect(),
            benign_requested,
            benign_admitted,
            benign_ratio,
        },
    );
    Ok(Outcome { report, log: sim.log().to_ndjson() })
}

/// Distinct 5-tuples delivered to `target`, keyed by the window of their
/// first delivery. Tuples come from the matching inject records.
pub(crate) fn admitted_per_window(records: &[LogRecord], target: &str, window_us: u64) -> BTreeMap<u64, u64> {
    let mut tuples = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<u64, u64> = BTreeMap::new();
    for r in records {
        match r.kind {
            LogKind::Inject => {
                if let Some(id) = r.get_u64("pkt_id") {
                    let key = (
                        r.get_str("src_ip").unwrap_or_default().to_string(),
                        r.get_str("dst_ip").unwrap_or_default().to_string(),
                        r.get_str("proto").unwrap_or_default().to_string(),
                        r.get_u64("src_port"),
                        r.get_u64("dst_port"),
                    );
                    tuples.insert(id, key);
                }
            }
            LogKind::Deliver if r.subject == target => {
                let Some(key) = r.get_u64("pkt_id").and_then(|id| tuples.get(&id)) else { continue };
                if seen.insert(key.clone()) {
                    *out.entry(r.time.as_micros() / window_us).or_default() += 1;
                }
            }
            _ => {}
        }
    }
    out
}
