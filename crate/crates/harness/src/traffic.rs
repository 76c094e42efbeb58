//! Traffic generators. Every generator is a pure function of its parameters and
//! the RNG, so scenario runs replay exactly.

use std::collections::BTreeMap;

use cssasim_core::net::{HostId, Packet, Proto, SimTime};
use cssasim_core::topology::Topology;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::modbus::{ModbusOp, MODBUS_PORT};

/// Canonical exploit header value (CVE-2014-6271).
pub const SHELLSHOCK_HEADER: &str = "() { :; }; /bin/bash -c 'cat /etc/passwd'";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    Benign,
    Flood,
    ShellshockHttp,
    ModbusRw,
}

/// What a generated packet is, for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Flood,
    Exploit,
    Modbus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed {
    pub at: SimTime,
    pub host: HostId,
    pub packet: Packet,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficParams {
    pub sources: Vec<HostId>,
    pub targets: Vec<HostId>,
    /// Aggregate rate over all sources: flows per second (ops per second for
    /// Modbus).
    pub rate: f64,
    pub start: SimTime,
    pub duration_us: u64,
    pub dst_port: u16,
    pub packets_per_flow: u32,
    pub payload_len: usize,
}

impl TrafficParams {
    pub fn new(sources: Vec<HostId>, targets: Vec<HostId>, rate: f64, start: SimTime, duration_us: u64) -> Self {
        TrafficParams { sources, targets, rate, start, duration_us, dst_port: 80, packets_per_flow: 1, payload_len: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrafficError {
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("{0}")]
    Invalid(String),
}

/// HTTP request whose User-Agent carries the exploit string.
pub fn shellshock_payload(host: &str) -> Vec<u8> {
    format!("GET /cgi-bin/status HTTP/1.1\r\nHost: {host}\r\nUser-Agent: {SHELLSHOCK_HEADER}\r\nAccept: */*\r\n\r\n")
        .into_bytes()
}

pub fn http_get(host: &str, path: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0\r\nAccept: text/html\r\n\r\n").into_bytes()
}

struct Ports(BTreeMap<HostId, u16>);

impl Ports {
    const FIRST: u16 = 20_000;

    /// Next ephemeral source port for `host`; wraps within the ephemeral range.
    fn next(&mut self, host: &HostId) -> u16 {
        let p = self.0.entry(host.clone()).or_insert(Self::FIRST);
        let out = *p;
        *p = if *p == u16::MAX { Self::FIRST } else { *p + 1 };
        out
    }
}

fn packet(topo: &Topology, src: &HostId, dst: &HostId, sport: u16, dport: u16, payload: Vec<u8>) -> Result<Packet, TrafficError> {
    let a = topo.host(src).ok_or_else(|| TrafficError::UnknownHost(src.clone()))?;
    let b = topo.host(dst).ok_or_else(|| TrafficError::UnknownHost(dst.clone()))?;
    Ok(Packet::new(a.mac, b.mac, a.ip, b.ip, Proto::Tcp, sport, dport, payload))
}

pub fn gen_traffic(
    kind: TrafficKind,
    p: &TrafficParams,
    topo: &Topology,
    rng: &mut impl Rng,
) -> Result<Vec<Timed>, TrafficError> {
    if p.sources.is_empty() || p.targets.is_empty() {
        return Err(TrafficError::Invalid("sources and targets must be non-empty".into()));
    }
    if !(p.rate.is_finite() && p.rate > 0.0) {
        return Err(TrafficError::Invalid(format!("rate must be positive, got {}", p.rate)));
    }
    for h in p.sources.iter().chain(&p.targets) {
        if topo.host(h).is_none() {
            return Err(TrafficError::UnknownHost(h.clone()));
        }
    }
    let mut out = match kind {
        TrafficKind::Benign => benign(p, topo, rng)?,
        TrafficKind::Flood => flood(p, topo)?,
        TrafficKind::ShellshockHttp => periodic(p, topo, Label::Exploit, |dst, _| shellshock_payload(dst.as_str()))?,
        TrafficKind::ModbusRw => modbus(p, topo, rng)?,
    };
    out.sort_by_key(|t| t.at);
    Ok(out)
}

fn end_of(p: &TrafficParams) -> SimTime {
    p.start + p.duration_us
}

fn benign(p: &TrafficParams, topo: &Topology, rng: &mut impl Rng) -> Result<Vec<Timed>, TrafficError> {
    let gap = Exp::new(p.rate).map_err(|e| TrafficError::Invalid(e.to_string()))?;
    let pairs: Vec<(&HostId, &HostId)> = p
        .sources
        .iter()
        .flat_map(|s| p.targets.iter().filter(move |t| *t != s).map(move |t| (s, t)))
        .collect();
    if pairs.is_empty() {
        return Err(TrafficError::Invalid("no distinct source/target pair".into()));
    }
    let mut ports = Ports(BTreeMap::new());
    let mut out = Vec::new();
    let mut t = p.start.as_micros() as f64;
    let end = end_of(p).as_micros() as f64;
    let mut n = 0u64;
    loop {
        t += gap.sample(rng) * 1e6;
        if t >= end {
            break;
        }
        let &(src, dst) = pairs.choose(rng).expect("non-empty");
        let sport = ports.next(src);
        for k in 0..p.packets_per_flow {
            let mut payload = if p.dst_port == 80 {
                http_get(dst.as_str(), &format!("/page/{n}"))
            } else {
                format!("flow {n} packet {k}").into_bytes()
            };
            payload.resize(payload.len().max(p.payload_len), b' ');
            let at = SimTime(t as u64 + u64::from(k) * 1_000);
            out.push(Timed { at, host: src.clone(), packet: packet(topo, src, dst, sport, p.dst_port, payload)?, label: Label::Benign });
        }
        n += 1;
    }
    Ok(out)
}

/// Constant aggregate rate of fresh 5-tuples, round-robin over sources and
/// targets. Exactly floor(rate * duration) flows.
fn flood(p: &TrafficParams, topo: &Topology) -> Result<Vec<Timed>, TrafficError> {
    periodic(p, topo, Label::Flood, |_, _| vec![0u8; 40])
}

fn periodic(
    p: &TrafficParams,
    topo: &Topology,
    label: Label,
    payload: impl Fn(&HostId, u64) -> Vec<u8>,
) -> Result<Vec<Timed>, TrafficError> {
    let count = (p.rate * p.duration_us as f64 / 1e6).floor() as u64;
    let mut ports = Ports(BTreeMap::new());
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let at = p.start + (i as f64 * 1e6 / p.rate) as u64;
        let src = &p.sources[(i % p.sources.len() as u64) as usize];
        let dst = &p.targets[(i % p.targets.len() as u64) as usize];
        let sport = ports.next(src);
        out.push(Timed { at, host: src.clone(), packet: packet(topo, src, dst, sport, p.dst_port, payload(dst, i))?, label });
    }
    Ok(out)
}

fn modbus(p: &TrafficParams, topo: &Topology, rng: &mut impl Rng) -> Result<Vec<Timed>, TrafficError> {
    let count = (p.rate * p.duration_us as f64 / 1e6).floor() as u64;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let at = p.start + (i as f64 * 1e6 / p.rate) as u64;
        let src = &p.sources[(i % p.sources.len() as u64) as usize];
        let dst = &p.targets[(i % p.targets.len() as u64) as usize];
        let register = rng.random_range(40_001..=40_100);
        let op = if rng.random_bool(0.5) {
            ModbusOp::write(register, rng.random_range(0..=1000))
        } else {
            ModbusOp::read(register, rng.random_range(1..=8))
        };
        // one long-lived connection per source
        let pkt = packet(topo, src, dst, 30_000, MODBUS_PORT, op.encode().to_vec())?;
        out.push(Timed { at, host: src.clone(), packet: pkt, label: Label::Modbus });
    }
    Ok(out)
}
