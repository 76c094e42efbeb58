//! Wall-clock benchmarks. Timings are hardware-bound; the checks only assert
//! orderings and growth.

use std::sync::Arc;
use std::time::{Duration, Instant};

use cssasim_core::channel::{ControlBody, ControlMsg, Direction, PacketInReason};
use cssasim_core::controller::{ControllerApp, ControllerCtx, ForwardingApp};
use cssasim_core::cssa::{load_policies, CssaApp, CssaConfig, PolicyError};
use cssasim_core::net::{HostId, Packet, Proto, SimTime};
use cssasim_core::secfn::{dpi_scan, DpiError, DpiRule, DpiRuleset, DpiVerdict};
use cssasim_core::topology::Topology;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, Params, ScenarioConfig};
use crate::presets::campus_topology;
use crate::report::MetricsReport;
use crate::scenario::{environment, Outcome, ScenarioError};
use crate::traffic::http_get;

/// Reference medians (seconds) for 10, 50 and 100 rules on the original testbed.
pub const DPI_REFERENCE_S: [(usize, f64); 3] = [(10, 0.008), (50, 0.0112), (100, 0.0264)];
/// Reference throughput reduction band, in percent.
pub const THROUGHPUT_REFERENCE_PCT: (f64, f64) = (4.0, 6.0);

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Dpi(#[from] DpiError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpiRow {
    pub rules: usize,
    pub median_ns: u64,
    pub p90_ns: u64,
    /// Trials whose scan evaluated exactly `rules` rules.
    pub full_scans: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpiBench {
    pub trials: usize,
    pub rows: Vec<DpiRow>,
}

/// N-1 non-matching deny signatures followed by one permit that matches the
/// probe, so every scan walks the whole list.
pub fn worst_case_ruleset(n: usize) -> DpiRuleset {
    let mut rules: Vec<DpiRule> = (1..n)
        .map(|i| DpiRule::deny(i as u32, format!(r"(?i)sig-{i:05}-[a-f0-9]{{8}}\s*\("), format!("signature {i}")))
        .collect();
    rules.push(DpiRule::permit(n as u32, r"(?i)^GET\s+/"));
    DpiRuleset::new(rules, DpiVerdict::Deny)
}

pub fn dpi_probe() -> Vec<u8> {
    let mut p = http_get("WEB", "/index.html");
    p.resize(512, b'a');
    p
}

fn sorted_ns(mut v: Vec<u64>) -> Vec<u64> {
    v.sort_unstable();
    v
}

pub fn bench_dpi(rule_counts: &[usize], trials: usize) -> Result<DpiBench, BenchError> {
    if rule_counts.is_empty() || rule_counts.windows(2).any(|w| w[0] > w[1]) || rule_counts.contains(&0) {
        return Err(BenchError::Invalid("rule counts must be positive and ascending".into()));
    }
    if trials == 0 {
        return Err(BenchError::Invalid("trials must be positive".into()));
    }
    let probe = dpi_probe();
    let mut rows = Vec::new();
    for &n in rule_counts {
        // fresh ruleset per N: nothing carries over from the previous size
        let compiled = worst_case_ruleset(n).compile()?;
        let mut samples = Vec::with_capacity(trials);
        let mut full = 0;
        for _ in 0..trials {
            let t = Instant::now();
            let out = dpi_scan(&compiled, std::hint::black_box(&probe));
            samples.push(t.elapsed().as_nanos() as u64);
            full += usize::from(out.rules_evaluated == n && out.verdict == DpiVerdict::Permit);
        }
        let s = sorted_ns(samples);
        rows.push(DpiRow {
            rules: n,
            median_ns: s[s.len() / 2],
            p90_ns: s[(s.len() * 9 / 10).min(s.len() - 1)],
            full_scans: full,
            reference_s: DPI_REFERENCE_S.iter().find(|(r, _)| *r == n).map(|(_, s)| *s),
        });
    }
    Ok(DpiBench { trials, rows })
}

pub fn score_dpi(report: &mut MetricsReport, b: &DpiBench) {
    let bad: Vec<_> = b.rows.iter().filter(|r| r.full_scans != b.trials).map(|r| r.rules).collect();
    report.check("rules_evaluated_equals_n", bad.is_empty(), format!("short scans at N = {bad:?}"));
    let medians: Vec<_> = b.rows.iter().map(|r| (r.rules, r.median_ns)).collect();
    report.check(
        "median_monotone",
        medians.windows(2).all(|w| w[0].1 <= w[1].1),
        format!("medians (N, ns): {medians:?}"),
    );
    if let (Some(first), Some(last)) = (b.rows.first(), b.rows.last()) {
        if b.rows.len() > 1 {
            let growth = last.median_ns as f64 / first.median_ns.max(1) as f64;
            report.check(
                "median_growth",
                growth >= 1.5,
                format!("latency({}) / latency({}) = {growth:.2}", last.rules, first.rules),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub rules: usize,
    pub with_cssa_per_s: f64,
    pub overhead_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputBench {
    pub switches: usize,
    pub hosts_per_switch: usize,
    pub packet_ins: usize,
    pub repeats: usize,
    pub without_cssa_per_s: f64,
    /// CSSA with only a catch-all permit: the dispatch cost alone.
    pub catch_all_overhead_pct: f64,
    pub rows: Vec<ThroughputRow>,
    pub reference_pct: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ThroughputParams {
    pub rule_counts: Vec<usize>,
    pub switches: usize,
    pub hosts_per_switch: usize,
    pub packet_ins: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl ThroughputParams {
    pub fn new(rule_counts: Vec<usize>, seed: u64) -> Self {
        ThroughputParams { rule_counts, switches: 20, hosts_per_switch: 10, packet_ins: 2000, repeats: 5, seed }
    }
}

/// `n - 1` deny policies ahead of one catch-all permit. Each filler policy
/// agrees with campus traffic on addresses and protocol and only misses on the
/// port, so resolution has to evaluate every condition of every policy.
pub fn throughput_policies(n: usize) -> String {
    let mut xml = String::from("<policies>\n");
    for i in 1..n {
        xml.push_str(&format!(
            r#"  <policy id="{i}" priority="{}"><src ip="10.0.0.0/8"/><dst ip="10.0.0.0/8"/><traffic proto="tcp" dport="{}"/><deny/></policy>"#,
            1000 + i,
            5000 + i
        ));
        xml.push('\n');
    }
    xml.push_str(&format!(r#"  <policy id="{n}" priority="1"><src ip="0.0.0.0/0"/><permit/></policy>"#));
    xml.push_str("\n</policies>\n");
    xml
}

fn packet_ins(topo: &Topology, count: usize, seed: u64) -> Vec<ControlMsg> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hosts: Vec<&HostId> = topo.hosts.keys().collect();
    (0..count)
        .map(|i| {
            let (a, b) = loop {
                let a = *hosts.choose(&mut rng).expect("hosts");
                let b = *hosts.choose(&mut rng).expect("hosts");
                if a != b {
                    break (topo.host(a).expect("known"), topo.host(b).expect("known"));
                }
            };
            let pkt = Packet::new(a.mac, b.mac, a.ip, b.ip, Proto::Tcp, 10_000 + (i % 50_000) as u16, 80, vec![0; 64]);
            ControlMsg {
                msg_id: i as u64 + 1_000,
                direction: Direction::SwitchToController,
                switch: a.switch.clone(),
                sent_at: SimTime(1_000 + i as u64),
                body: ControlBody::PacketIn { in_port: a.port, reason: PacketInReason::NoMatch, packet: pkt },
            }
        })
        .collect()
}

fn handshake(app: &mut dyn ControllerApp, topo: &Topology) {
    for (n, (sw, caps)) in topo.switches.iter().enumerate() {
        for body in [
            ControlBody::Hello { version: 1 },
            ControlBody::Features { caps: caps.iter().copied().collect(), ports: topo.ports_of(sw) },
        ] {
            let msg = ControlMsg { msg_id: n as u64, direction: Direction::SwitchToController, switch: sw.clone(), sent_at: SimTime::ZERO, body };
            app.on_message(&mut ControllerCtx::new(SimTime::ZERO), &msg);
        }
    }
}

/// Packet-ins handled per second by a freshly started app.
fn rate(mut app: Box<dyn ControllerApp>, topo: &Topology, msgs: &[ControlMsg]) -> f64 {
    handshake(app.as_mut(), topo);
    let t = Instant::now();
    for m in msgs {
        let mut ctx = ControllerCtx::new(m.sent_at);
        app.on_message(&mut ctx, m);
        std::hint::black_box(ctx.into_parts());
    }
    msgs.len() as f64 / t.elapsed().max(Duration::from_nanos(1)).as_secs_f64()
}

pub fn bench_throughput(p: &ThroughputParams) -> Result<ThroughputBench, BenchError> {
    if p.rule_counts.is_empty() || p.rule_counts.contains(&0) || p.rule_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::Invalid("rule counts must be positive and ascending".into()));
    }
    if p.packet_ins == 0 || p.repeats == 0 {
        return Err(BenchError::Invalid("packet_ins and repeats must be positive".into()));
    }
    let topo: Arc<Topology> = campus_topology(p.switches, p.hosts_per_switch);
    let msgs = packet_ins(&topo, p.packet_ins, p.seed);
    let mut sets = Vec::new();
    for &n in std::iter::once(&1).chain(&p.rule_counts) {
        sets.push((n, load_policies(&throughput_policies(n))?));
    }
    let cssa = |set| -> Box<dyn ControllerApp> { Box::new(CssaApp::new(topo.clone(), set, CssaConfig { notify_audit: false, ..CssaConfig::default() })) };
    let mut off = 0f64;
    let mut on = vec![0f64; sets.len()];
    // interleaved so drift in machine load hits every configuration alike
    for _ in 0..p.repeats {
        off = off.max(rate(Box::new(ForwardingApp::new(topo.clone())), &topo, &msgs));
        for (i, (_, set)) in sets.iter().enumerate() {
            on[i] = on[i].max(rate(cssa(set.clone()), &topo, &msgs));
        }
    }
    let overhead = |r: f64| (off - r) / off * 100.0;
    let rows = sets
        .iter()
        .zip(&on)
        .skip(1)
        .map(|((n, _), r)| ThroughputRow { rules: *n, with_cssa_per_s: *r, overhead_pct: overhead(*r) })
        .collect();
    Ok(ThroughputBench {
        switches: p.switches,
        hosts_per_switch: p.hosts_per_switch,
        packet_ins: p.packet_ins,
        repeats: p.repeats,
        without_cssa_per_s: off,
        catch_all_overhead_pct: overhead(on[0]),
        rows,
        reference_pct: THROUGHPUT_REFERENCE_PCT,
    })
}

pub fn score_throughput(report: &mut MetricsReport, b: &ThroughputBench) {
    let faster: Vec<_> = b.rows.iter().filter(|r| r.with_cssa_per_s >= b.without_cssa_per_s).map(|r| r.rules).collect();
    report.check("cssa_costs_throughput", faster.is_empty(), format!("CSSA not slower at N = {faster:?}"));
    if let (Some(first), Some(last)) = (b.rows.first(), b.rows.last()) {
        report.check(
            "overhead_grows_with_rules",
            last.overhead_pct >= first.overhead_pct,
            format!("overhead({}) = {:.1}%, overhead({}) = {:.1}%", first.rules, first.overhead_pct, last.rules, last.overhead_pct),
        );
    }
}

fn bench_outcome(cfg: &ScenarioConfig, section: &str, value: impl Serialize, score: impl FnOnce(&mut MetricsReport)) -> Outcome {
    let hash = cfg.hash_with(&[]);
    let mut report = MetricsReport::new(cfg.name.as_str(), environment(cfg, hash, 0, "none"));
    score(&mut report);
    report.section(section, value);
    Outcome { report, log: String::new() }
}

pub fn dpi_scenario(cfg: &ScenarioConfig) -> Result<Outcome, ScenarioError> {
    cfg.reject_files()?;
    let mut p = Params::new(cfg);
    let counts = p.ascending("rule_counts", &[10, 50, 100])?;
    let trials = p.count("trials", 1000, 1, 1_000_000)?;
    p.finish()?;
    let b = bench_dpi(&counts, trials)?;
    Ok(bench_outcome(cfg, "dpi", &b, |r| score_dpi(r, &b)))
}

pub fn throughput_scenario(cfg: &ScenarioConfig) -> Result<Outcome, ScenarioError> {
    cfg.reject_files()?;
    let mut p = Params::new(cfg);
    let mut tp = ThroughputParams::new(p.ascending("rule_counts", &[100, 200, 300, 400])?, cfg.seed);
    tp.switches = p.count("switches", 20, 3, 200)?;
    tp.hosts_per_switch = p.count("hosts_per_switch", 10, 1, 200)?;
    tp.packet_ins = p.count("packet_ins", 2000, 1, 1_000_000)?;
    tp.repeats = p.count("repeats", 5, 1, 100)?;
    p.finish()?;
    if tp.switches * tp.hosts_per_switch < 2 {
        return Err(ConfigError::Invalid("need at least two hosts".into()).into());
    }
    let b = bench_throughput(&tp)?;
    Ok(bench_outcome(cfg, "throughput", &b, |r| score_throughput(r, &b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_case_walks_every_rule() {
        let probe = dpi_probe();
        for n in [1, 2, 10, 100] {
            let c = worst_case_ruleset(n).compile().unwrap();
            let out = dpi_scan(&c, &probe);
            assert_eq!(out.rules_evaluated, n);
            assert_eq!(out.matched, Some(n as u32));
            assert_eq!(out.verdict, DpiVerdict::Permit);
        }
    }

    #[test]
    fn throughput_policy_document_loads() {
        for n in [1, 100, 400] {
            let set = load_policies(&throughput_policies(n)).unwrap();
            assert_eq!(set.policies().len(), n);
        }
    }

    #[test]
    fn small_throughput_run() {
        let mut p = ThroughputParams::new(vec![5, 50], 1);
        p.packet_ins = 50;
        p.repeats = 1;
        p.switches = 6;
        p.hosts_per_switch = 2;
        let b = bench_throughput(&p).unwrap();
        assert_eq!(b.rows.len(), 2);
        assert!(b.without_cssa_per_s > 0.0);
    }

    #[test]
    fn bad_counts_rejected() {
        assert!(bench_dpi(&[50, 10], 10).is_err());
        assert!(bench_dpi(&[10], 0).is_err());
        assert!(bench_throughput(&ThroughputParams::new(vec![], 1)).is_err());
    }
}
