use std::collections::BTreeSet;

use cssasim_core::net::{HostId, SimTime};
use cssasim_core::sim::log::{LogKind, LogRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{count_kind, cssa_sim, environment, ids_with, ratio, Outcome, ScenarioError};
use crate::config::{Params, ScenarioConfig};
use crate::driver::{Driver, DriverOptions};
use crate::presets;
use crate::report::MetricsReport;
use crate::traffic::{gen_traffic, Label, TrafficError, TrafficKind, TrafficParams};

#[derive(Debug, Serialize)]
struct ShellshockSection {
    signatures: bool,
    exploits_sent: usize,
    exploits_forwarded: usize,
    exploits_delivered: usize,
    exploit_drop_switches: BTreeSet<String>,
    isolated_at_us: Option<u64>,
    attacker_deliveries_after_isolation: usize,
}

pub(super) fn run(cfg: &ScenarioConfig, opts: DriverOptions) -> Result<Outcome, ScenarioError> {
    let mut p = Params::new(cfg);
    let attacker = p.hosts("attacker", &["ATK1"])?;
    let victim = p.hosts("victim", &["WEB"])?;
    let client = p.hosts("client", &["MTU"])?;
    let benign_rate = p.positive("benign_rate", 5.0)?;
    let attacker_browse_rate = p.positive("attacker_browse_rate", 2.0)?;
    let exploit_rate = p.positive("exploit_rate", 2.0)?;
    let exploit_start_s = p.positive("exploit_start_s", 1.0)?;
    let signatures: bool = p.get("signatures", true)?;
    p.finish()?;

    let default = if signatures { presets::SHELLSHOCK_POLICIES } else { presets::SHELLSHOCK_NOSIG_POLICIES };
    let inputs = cfg.inputs(default)?;
    let duration = cfg.duration_or(5.0)?;
    let topo = inputs.topology.clone();
    let attacker_id = attacker[0].clone();
    let attacker_switch = topo
        .host(&attacker_id)
        .ok_or_else(|| TrafficError::UnknownHost(attacker_id.clone()))?
        .switch
        .to_string();

    let mut driver = Driver::new(cssa_sim(topo.clone(), inputs.policies, cfg.seed), opts);
    driver.await_start();
    let t0 = driver.sim().now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exploit_at = t0 + (exploit_start_s * 1e6) as u64;
    if exploit_at >= t0 + duration {
        return Err(crate::config::ConfigError::Invalid("exploit_start_s must fall inside the run".into()).into());
    }
    let exploit = TrafficParams::new(attacker.clone(), victim.clone(), exploit_rate, exploit_at, (t0 + duration).saturating_sub(exploit_at));
    let legit = TrafficParams::new(client, victim.clone(), benign_rate, t0, duration);
    let browse = TrafficParams::new(attacker, victim, attacker_browse_rate, t0, duration);
    let mut traffic = gen_traffic(TrafficKind::ShellshockHttp, &exploit, &topo, &mut rng)?;
    let client_traffic = gen_traffic(TrafficKind::Benign, &legit, &topo, &mut rng)?;
    let client_count = client_traffic.len();
    traffic.extend(client_traffic);
    traffic.extend(gen_traffic(TrafficKind::Benign, &browse, &topo, &mut rng)?);
    traffic.sort_by_key(|t| t.at);
    driver.run(traffic, t0 + duration)?;
    driver.settle(100_000);

    let sim = driver.sim();
    let records = sim.log().records();
    let exploits = ids_with(driver.labels(), Label::Exploit);
    let forwarded = count_kind(records, LogKind::Forward, &exploits);
    let delivered = count_kind(records, LogKind::Deliver, &exploits);
    let drop_switches: BTreeSet<String> = records
        .iter()
        .filter(|r| r.kind == LogKind::Drop && r.get_u64("pkt_id").is_some_and(|id| exploits.contains(&id)))
        .map(|r| r.subject.clone())
        .collect();
    let isolated_at = isolation_time(records, &attacker_id);
    let after = isolated_at.map(|t| attacker_deliveries_after(records, &attacker_id, t)).unwrap_or(0);

    let mut report = MetricsReport::new(cfg.name.as_str(), environment(cfg, inputs.config_hash, duration, sim.controller_name()));
    report.absorb_log(records, driver.labels());
    let sig_alerts = report.alerts.get("signature_match").copied().unwrap_or(0);
    if signatures {
        report.check(
            "exploit_contained_at_ingress",
            forwarded == 0 && delivered == 0 && drop_switches.iter().all(|s| *s == attacker_switch),
            format!("{forwarded} forwarded, {delivered} delivered, dropped at {drop_switches:?}"),
        );
        report.check("single_signature_alert", sig_alerts == 1, format!("{sig_alerts} signature alerts"));
        report.check(
            "attacker_silenced_after_isolation",
            isolated_at.is_some() && after == 0,
            match isolated_at {
                Some(t) => format!("isolated at {t}, {after} deliveries after"),
                None => "attacker was never isolated".to_string(),
            },
        );
        // client traffic is all the benign traffic that does not come from the attacker
        let client_delivered = benign_delivered_from_others(records, driver.labels(), &attacker_id);
        let r = ratio(client_delivered as u64, client_count as u64);
        report.check("client_served", r >= 0.95, format!("{client_delivered}/{client_count} client requests delivered"));
    } else {
        report.check("exploit_reaches_victim", delivered > 0, format!("{delivered}/{} exploit packets delivered", exploits.len()));
    }
    report.section(
        "shellshock",
        ShellshockSection {
            signatures,
            exploits_sent: exploits.len(),
            exploits_forwarded: forwarded,
            exploits_delivered: delivered,
            exploit_drop_switches: drop_switches,
            isolated_at_us: isolated_at.map(SimTime::as_micros),
            attacker_deliveries_after_isolation: after,
        },
    );
    Ok(Outcome { report, log: sim.log().to_ndjson() })
}

/// When the first isolate command for `host` was applied.
fn isolation_time(records: &[LogRecord], host: &HostId) -> Option<SimTime> {
    let want = format!("isolate {host}");
    records
        .iter()
        .find(|r| r.kind == LogKind::Command && r.get_str("command") == Some(want.as_str()))
        .map(|r| r.time)
}

fn injected_by(records: &[LogRecord], host: &HostId) -> BTreeSet<u64> {
    records
        .iter()
        .filter(|r| r.kind == LogKind::Inject && r.subject == host.as_str())
        .filter_map(|r| r.get_u64("pkt_id"))
        .collect()
}

fn attacker_deliveries_after(records: &[LogRecord], host: &HostId, t: SimTime) -> usize {
    let ids = injected_by(records, host);
    records
        .iter()
        .filter(|r| r.kind == LogKind::Deliver && r.time >= t)
        .filter(|r| r.get_u64("pkt_id").is_some_and(|id| ids.contains(&id)))
        .count()
}

fn benign_delivered_from_others(
    records: &[LogRecord],
    labels: &std::collections::BTreeMap<cssasim_core::net::PacketId, Label>,
    attacker: &HostId,
) -> usize {
    let mut ids = ids_with(labels, Label::Benign);
    for id in injected_by(records, attacker) {
        ids.remove(&id);
    }
    count_kind(records, LogKind::Deliver, &ids)
}
