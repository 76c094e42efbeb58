//! Run metrics. Counters are derived from the event log alone so a report can
//! be re-checked against the NDJSON it was written with.

use std::collections::BTreeMap;

use cssasim_core::net::PacketId;
use cssasim_core::sim::log::{LogKind, LogRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::traffic::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    /// SHA-256 of the scenario config and its input files.
    pub config_hash: String,
    pub duration_us: u64,
    pub controller: String,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<String, u64>,
    pub new_flows_admitted: u64,
    pub new_flows_denied: u64,
    pub ctrl_messages: u64,
    pub rules_installed: u64,
    pub rules_removed: u64,
    pub decisions: u64,
    pub alerts_raised: u64,
}

impl Counters {
    pub fn from_log(records: &[LogRecord]) -> Self {
        let mut c = Counters::default();
        for r in records {
            match r.kind {
                LogKind::Inject => c.injected += 1,
                LogKind::Deliver => c.delivered += 1,
                LogKind::Drop => {
                    let reason = r.get_str("reason").unwrap_or("unknown").to_string();
                    *c.dropped.entry(reason).or_default() += 1;
                }
                LogKind::NewFlow => match r.get_bool("admitted") {
                    Some(true) => c.new_flows_admitted += 1,
                    _ => c.new_flows_denied += 1,
                },
                LogKind::CtrlSend => c.ctrl_messages += 1,
                LogKind::RuleInstall => c.rules_installed += 1,
                LogKind::RuleRemove => c.rules_removed += 1,
                LogKind::Decision => c.decisions += 1,
                LogKind::Alert if alert_event(r) == Some("new") => c.alerts_raised += 1,
                _ => {}
            }
        }
        c
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }
}

pub(crate) fn alert_event(r: &LogRecord) -> Option<&str> {
    r.detail.get("event").and_then(Value::as_str)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub fn by_label(records: &[LogRecord], labels: &BTreeMap<PacketId, Label>) -> BTreeMap<Label, LabelCounts> {
    let mut out: BTreeMap<Label, LabelCounts> = BTreeMap::new();
    for r in records {
        let Some(label) = r.get_u64("pkt_id").and_then(|id| labels.get(&PacketId(id))) else { continue };
        let e = out.entry(*label).or_default();
        match r.kind {
            LogKind::Inject => e.injected += 1,
            LogKind::Deliver => e.delivered += 1,
            LogKind::Drop => e.dropped += 1,
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LatencyStats {
    /// Nearest-rank percentiles; `None` for an empty sample.
    pub fn from_samples(mut samples: Vec<u64>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |p: f64| samples[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(LatencyStats {
            count: n as u64,
            mean_us: samples.iter().map(|&x| x as f64).sum::<f64>() / n as f64,
            p50_us: rank(0.5),
            p99_us: rank(0.99),
            max_us: samples[n - 1],
        })
    }

    pub fn of_deliveries(records: &[LogRecord]) -> Option<Self> {
        Self::from_samples(
            records
                .iter()
                .filter(|r| r.kind == LogKind::Deliver)
                .filter_map(|r| r.get_u64("latency_us"))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub environment: Environment,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub by_label: BTreeMap<Label, LabelCounts>,
    pub alerts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    /// Scenario-specific measurements.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sections: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
}

impl MetricsReport {
    pub fn new(scenario: impl Into<String>, environment: Environment) -> Self {
        MetricsReport {
            scenario: scenario.into(),
            environment,
            counters: Counters::default(),
            by_label: BTreeMap::new(),
            alerts: BTreeMap::new(),
            latency: None,
            sections: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    /// Fills counters, per-label counts, alert reasons and latency from a log.
    pub fn absorb_log(&mut self, records: &[LogRecord], labels: &BTreeMap<PacketId, Label>) {
        self.counters = Counters::from_log(records);
        self.by_label = by_label(records, labels);
        self.latency = LatencyStats::of_deliveries(records);
        self.alerts.clear();
        for r in records.iter().filter(|r| r.kind == LogKind::Alert && alert_event(r) == Some("new")) {
            let reason = r.detail.pointer("/alert/reason").and_then(Value::as_str).unwrap_or("unknown");
            *self.alerts.entry(reason.to_string()).or_default() += 1;
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, passed, detail));
    }

    pub fn section(&mut self, name: &str, value: impl Serialize) {
        self.sections.insert(name.to_string(), serde_json::to_value(value).expect("section serializes"));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
