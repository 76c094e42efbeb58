//! Append-only log of every message between the controller and the CSSA.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::net::{SimTime, SwitchId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditDirection {
    ToCssa,
    FromCssa,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub time: SimTime,
    pub direction: AuditDirection,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchId>,
    pub summary: String,
}

#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends and returns the assigned sequence number (gapless from 1).
    pub fn append(
        &mut self,
        time: SimTime,
        direction: AuditDirection,
        kind: impl Into<String>,
        switch: Option<SwitchId>,
        summary: impl Into<String>,
    ) -> u64 {
        let seq = self.records.len() as u64 + 1;
        self.records.push(AuditRecord { seq, time, direction, kind: kind.into(), switch, summary: summary.into() });
        seq
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&AuditRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn since(&self, from_seq: u64) -> &[AuditRecord] {
        let start = (from_seq.max(1) - 1) as usize;
        self.records.get(start..).unwrap_or(&[])
    }

    pub fn export_ndjson(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records back; sequence numbers must be gapless from 1.
    pub fn import_ndjson(r: impl BufRead) -> io::Result<Self> {
        let mut records: Vec<AuditRecord> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AuditRecord =
                serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            if rec.seq != records.len() as u64 + 1 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("audit seq {} follows {}", rec.seq, records.len()),
                ));
            }
            records.push(rec);
        }
        Ok(AuditLog { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gapless_and_round_trips() {
        let mut log = AuditLog::new();
        for i in 0..50u64 {
            let dir = [AuditDirection::ToCssa, AuditDirection::FromCssa, AuditDirection::Operator][(i % 3) as usize];
            let seq = log.append(SimTime(i), dir, "packet_in", Some(SwitchId::new("SW1")), format!("m{i}"));
            assert_eq!(seq, i + 1);
        }
        let mut buf = Vec::new();
        log.export_ndjson(&mut buf).unwrap();
        let back = AuditLog::import_ndjson(buf.as_slice()).unwrap();
        assert_eq!(back.records(), log.records());
        assert_eq!(log.since(48).len(), 3);
        assert_eq!(log.since(0).len(), 50);
        assert!(log.since(99).is_empty());
    }

    #[test]
    fn import_rejects_gaps() {
        let text = r#"{"seq":1,"time":0,"direction":"to_cssa","kind":"hello","summary":""}
{"seq":3,"time":0,"direction":"to_cssa","kind":"hello","summary":""}
"#;
        assert!(AuditLog::import_ndjson(text.as_bytes()).is_err());
    }
}
