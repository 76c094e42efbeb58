//! Typed simulation event log with newline-delimited JSON export.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::net::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Inject,
    Arrival,
    Match,
    Miss,
    Buffered,
    Released,
    Forward,
    Deliver,
    Drop,
    NewFlow,
    TvWarning,
    CtrlSend,
    CtrlDeliver,
    CtrlError,
    RuleInstall,
    RuleReject,
    RuleRemove,
    FuncConfig,
    KeyInstall,
    Decision,
    Alert,
    Command,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Inject => "inject",
            LogKind::Arrival => "arrival",
            LogKind::Match => "match",
            LogKind::Miss => "miss",
            LogKind::Buffered => "buffered",
            LogKind::Released => "released",
            LogKind::Forward => "forward",
            LogKind::Deliver => "deliver",
            LogKind::Drop => "drop",
            LogKind::NewFlow => "new_flow",
            LogKind::TvWarning => "tv_warning",
            LogKind::CtrlSend => "ctrl_send",
            LogKind::CtrlDeliver => "ctrl_deliver",
            LogKind::CtrlError => "ctrl_error",
            LogKind::RuleInstall => "rule_install",
            LogKind::RuleReject => "rule_reject",
            LogKind::RuleRemove => "rule_remove",
            LogKind::FuncConfig => "func_config",
            LogKind::KeyInstall => "key_install",
            LogKind::Decision => "decision",
            LogKind::Alert => "alert",
            LogKind::Command => "command",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: SimTime,
    pub kind: LogKind,
    pub subject: String,
    pub detail: Value,
}

impl LogRecord {
    pub fn get_str(&self, field: &str) -> Option<&str> {
        self.detail.get(field).and_then(Value::as_str)
    }

    pub fn get_u64(&self, field: &str) -> Option<u64> {
        self.detail.get(field).and_then(Value::as_u64)
    }

    pub fn get_bool(&self, field: &str) -> Option<bool> {
        self.detail.get(field).and_then(Value::as_bool)
    }
}

#[derive(Debug, Clone)]
pub struct EventLog {
    records: Vec<LogRecord>,
    enabled: bool,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog { records: Vec::new(), enabled: true }
    }
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        EventLog { records: Vec::new(), enabled }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, time: SimTime, kind: LogKind, subject: impl Into<String>, detail: Value) {
        if self.enabled {
            self.records.push(LogRecord { time, kind, subject: subject.into(), detail });
        }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, kind: LogKind) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("JSON is UTF-8")
    }
}

pub fn read_ndjson<R: BufRead>(r: R) -> io::Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ndjson_round_trip() {
        let mut log = EventLog::default();
        log.push(SimTime(5), LogKind::Inject, "h1", json!({"pkt_id": 1, "bytes": 10}));
        log.push(SimTime(9), LogKind::Deliver, "h2", json!({"pkt_id": 1}));
        let text = log.to_ndjson();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"time":5,"kind":"inject","subject":"h1","detail":{"bytes":10,"pkt_id":1}}"#));
        let back = read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back, log.records());
    }

    #[test]
    fn disabled_log_records_nothing() {
        let mut log = EventLog::new(false);
        log.push(SimTime(1), LogKind::Drop, "s", json!({}));
        assert!(log.is_empty());
    }
}
