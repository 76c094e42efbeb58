//! Bulk transfers across a path of legacy switches, with and without
//! edge-to-edge flow encryption, optionally under benign cross traffic.

use std::sync::Arc;
use std::time::{Duration, Instant};

use cssasim_core::cssa::load_policies;
use cssasim_core::flow::FlowMatch;
use cssasim_core::net::{HostId, Packet, Proto, SimTime};
use cssasim_core::secfn::{fe_decrypt, fe_encrypt, KeyRecord, KeyRole, SecretKey, KEY_LEN};
use cssasim_core::sim::{SimError, Simulation, TapId};
use cssasim_core::topology::Topology;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cssa_sim, environment, Outcome, ScenarioError};
use crate::config::{ConfigError, Params, ScenarioConfig};
use crate::presets::line_topology;
use crate::report::MetricsReport;
use crate::traffic::{gen_traffic, TrafficKind, TrafficParams};

/// Embedded at the start of every plaintext chunk; must never be seen on a
/// tapped link once the flow is encrypted.
pub const MARKER: &[u8; 32] = b"##LEGACY-PLAINTEXT-MARKER-0042##";

const SETUP_AT_US: u64 = 20_000;
const TRANSFER_AT_US: u64 = 100_000;
const TRANSFER_PORT: u16 = 7000;
const CROSS_PORT: u16 = 9000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptionPoint {
    pub size: usize,
    pub encrypted: bool,
    pub cross_traffic: bool,
    pub chunks: usize,
    pub delivered_intact: usize,
    /// First chunk injected to last chunk delivered, in simulated time.
    pub sim_delay_us: u64,
    /// Wall-clock cost of encrypting and decrypting every chunk once.
    pub crypto_us: f64,
    pub delay_us: f64,
    /// Tap records on mid-path links whose payload shows the marker.
    pub marker_sightings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptionResult {
    pub points: Vec<EncryptionPoint>,
    pub identity_trials: usize,
    pub identity_failures: usize,
}

impl EncryptionResult {
    pub fn point(&self, size: usize, encrypted: bool, cross: bool) -> Option<&EncryptionPoint> {
        self.points.iter().find(|p| p.size == size && p.encrypted == encrypted && p.cross_traffic == cross)
    }

    /// Delays of one curve in ascending size order.
    pub fn curve(&self, encrypted: bool, cross: bool) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = self
            .points
            .iter()
            .filter(|p| p.encrypted == encrypted && p.cross_traffic == cross)
            .map(|p| (p.size, p.delay_us))
            .collect();
        v.sort_by_key(|(s, _)| *s);
        v
    }
}

#[derive(Debug, Clone)]
pub struct EncryptionParams {
    pub sizes: Vec<usize>,
    pub cross_traffic: bool,
    pub path_len: usize,
    pub hosts_per_edge: usize,
    /// Cross-traffic flows per second, all edge hosts but the transfer pair.
    pub cross_rate: f64,
    pub chunk: usize,
    pub identity_trials: usize,
    pub seed: u64,
}

impl EncryptionParams {
    pub fn new(sizes: Vec<usize>, cross_traffic: bool, seed: u64) -> Self {
        EncryptionParams {
            sizes,
            cross_traffic,
            path_len: 4,
            hosts_per_edge: 200,
            cross_rate: 400.0,
            chunk: 8 * 1024,
            identity_trials: 1000,
            seed,
        }
    }
}

pub(super) fn run(cfg: &ScenarioConfig) -> Result<Outcome, ScenarioError> {
    let mut p = Params::new(cfg);
    let mut ep = EncryptionParams::new(p.sizes("sizes", &[1024, 10 * 1024, 100 * 1024, 1024 * 1024])?, p.get("cross_traffic", true)?, cfg.seed);
    ep.path_len = p.count("path_len", 4, 2, 16)?;
    ep.hosts_per_edge = p.count("hosts_per_edge", 200, 2, 1000)?;
    ep.cross_rate = p.positive("cross_rate", 400.0)?;
    ep.chunk = p.count("chunk", 8 * 1024, 64, cssasim_core::net::MAX_PAYLOAD)?;
    ep.identity_trials = p.count("identity_trials", 1000, 1, 1_000_000)?;
    p.finish()?;
    cfg.reject_files()?;

    let (result, log, sim_us) = measure(&ep)?;
    let hash = cfg.hash_with(&[]);
    let mut report = MetricsReport::new(cfg.name.as_str(), environment(cfg, hash, sim_us, "cssa"));
    score(&mut report, &result, &ep);
    report.section("encryption", &result);
    Ok(Outcome { report, log })
}

pub fn score(report: &mut MetricsReport, r: &EncryptionResult, ep: &EncryptionParams) {
    report.check(
        "decrypt_encrypt_identity",
        r.identity_failures == 0,
        format!("{} failures in {} trials", r.identity_failures, r.identity_trials),
    );
    let leaks: usize = r.points.iter().filter(|p| p.encrypted).map(|p| p.marker_sightings).sum();
    report.check("marker_never_on_mid_path", leaks == 0, format!("{leaks} sightings on encrypted runs"));
    let broken: Vec<_> = r.points.iter().filter(|p| p.delivered_intact != p.chunks).map(|p| (p.size, p.encrypted)).collect();
    report.check("transfers_intact", broken.is_empty(), format!("incomplete: {broken:?}"));
    let crosses: &[bool] = if ep.cross_traffic { &[false, true] } else { &[false] };
    let mut slower = Vec::new();
    let mut monotone = Vec::new();
    for &cross in crosses {
        for &size in &ep.sizes {
            if let (Some(e), Some(pl)) = (r.point(size, true, cross), r.point(size, false, cross)) {
                if e.delay_us < pl.delay_us {
                    slower.push((size, cross));
                }
            }
        }
        for enc in [false, true] {
            let c = r.curve(enc, cross);
            if c.windows(2).any(|w| w[1].1 < w[0].1) {
                monotone.push((enc, cross));
            }
        }
    }
    report.check("encrypted_not_faster", slower.is_empty(), format!("violations (size, cross): {slower:?}"));
    report.check("delay_grows_with_size", monotone.is_empty(), format!("non-monotone curves (encrypted, cross): {monotone:?}"));
}

/// Runs every (size, mode, cross) point plus the identity trials. Returns the
/// concatenated event logs and the total simulated time.
pub fn measure(ep: &EncryptionParams) -> Result<(EncryptionResult, String, u64), ScenarioError> {
    if ep.sizes.is_empty() || ep.sizes.iter().any(|&s| s < MARKER.len()) {
        return Err(ConfigError::Invalid(format!("sizes must be at least {} bytes", MARKER.len())).into());
    }
    if ep.chunk < 2 * MARKER.len() {
        return Err(ConfigError::Invalid(format!("chunk must be at least {} bytes", 2 * MARKER.len())).into());
    }
    let topo = line_topology(ep.path_len, ep.hosts_per_edge, 100, 100);
    let crosses: &[bool] = if ep.cross_traffic { &[false, true] } else { &[false] };
    let mut points = Vec::new();
    let mut log = String::new();
    let mut sim_us = 0;
    for &cross in crosses {
        for &size in &ep.sizes {
            for encrypted in [false, true] {
                let (point, sim) = transfer(&topo, ep, size, encrypted, cross)?;
                sim_us += sim.now().as_micros();
                log.push_str(&sim.log().to_ndjson());
                points.push(point);
            }
        }
    }
    let identity_failures = identity_failures(ep.identity_trials, ep.seed);
    Ok((EncryptionResult { points, identity_trials: ep.identity_trials, identity_failures }, log, sim_us))
}

fn policies(topo: &Topology, encrypted: bool) -> String {
    let action = if encrypted { "<encrypt/>" } else { "<permit/>" };
    let a = topo.host(&HostId::new("A0")).expect("line topology has A0").ip.octets();
    let b = topo.host(&HostId::new("B0")).expect("line topology has B0").ip.octets();
    format!(
        r#"<policies>
  <policy id="1" priority="60"><src host="A0"/><dst host="B0"/><traffic proto="tcp" dport="{TRANSFER_PORT}"/>{action}</policy>
  <policy id="2" priority="10"><src ip="{}.{}.0.0/16"/><dst ip="{}.{}.0.0/16"/><permit/></policy>
</policies>"#,
        a[0], a[1], b[0], b[1]
    )
}

/// Splits `size` bytes into near-equal chunks of at most `chunk` bytes, each
/// starting with the marker.
fn chunks(size: usize, chunk: usize, rng: &mut impl RngCore) -> Vec<Vec<u8>> {
    let count = size.div_ceil(chunk);
    (0..count)
        .map(|i| {
            let n = size / count + usize::from(i < size % count);
            let mut c = vec![0u8; n];
            c[..MARKER.len()].copy_from_slice(MARKER);
            rng.fill_bytes(&mut c[MARKER.len()..]);
            c
        })
        .collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn transfer(topo: &Arc<Topology>, ep: &EncryptionParams, size: usize, encrypted: bool, cross: bool) -> Result<(EncryptionPoint, Simulation), ScenarioError> {
    let set = load_policies(&policies(topo, encrypted)).map_err(ConfigError::from)?;
    let mut sim = cssa_sim(topo.clone(), set, ep.seed);
    let switches: Vec<_> = topo.switches.keys().cloned().collect();
    let taps: Vec<TapId> = switches
        .windows(2)
        .map(|w| sim.tap_link(&w[0], &w[1]))
        .collect::<Result<_, SimError>>()?;
    let t0 = sim.now();
    let mut rng = ChaCha8Rng::seed_from_u64(ep.seed ^ size as u64);
    let payloads = chunks(size, ep.chunk, &mut rng);
    // the serialization budget of the transfer plus slack, so cross traffic
    // covers the whole transfer
    let span_us = TRANSFER_AT_US + (size as u64 * 8 / 100) * 2 + 50_000;
    if cross {
        let others = |side: &str| (1..ep.hosts_per_edge).map(|k| HostId::new(format!("{side}{k}"))).collect::<Vec<_>>();
        let mut ct = TrafficParams::new(others("A"), others("B"), ep.cross_rate, t0, span_us);
        ct.dst_port = CROSS_PORT;
        ct.payload_len = 1200;
        ct.packets_per_flow = 4;
        let mut trng = ChaCha8Rng::seed_from_u64(ep.seed);
        for t in gen_traffic(TrafficKind::Benign, &ct, topo, &mut trng)? {
            sim.inject_at(t.at, &t.host, t.packet)?;
        }
    }

    let a0 = HostId::new("A0");
    let b0 = HostId::new("B0");
    let (src, dst) = (topo.host(&a0).expect("A0"), topo.host(&b0).expect("B0"));
    let mk = |payload: Vec<u8>| Packet::new(src.mac, dst.mac, src.ip, dst.ip, Proto::Tcp, 40_000, TRANSFER_PORT, payload);
    // one small packet sets the flow up so the transfer is not held in the
    // switch buffer while the controller decides
    sim.inject_at(t0 + SETUP_AT_US, &a0, mk(MARKER.to_vec()))?;
    let start = t0 + TRANSFER_AT_US;
    sim.run_until(start);
    for c in &payloads {
        sim.inject_packet(&a0, mk(c.clone()))?;
    }
    let limit = start + 10_000_000;
    let expected = payloads.len() + 1;
    while sim.deliveries(&b0).len() < expected && sim.now() < limit {
        let next = sim.now() + 1_000;
        sim.run_until(next);
    }
    let got = sim.deliveries(&b0);
    let data: Vec<_> = got.iter().filter(|d| d.time >= start).collect();
    let delivered_intact = data.iter().zip(&payloads).filter(|(d, p)| d.packet.payload == **p && !d.packet.envelope.is_encrypted()).count();
    let last = data.iter().map(|d| d.time).max().unwrap_or(sim.now());
    let sim_delay_us = last.saturating_sub(start);
    let crypto_us = if encrypted { crypto_cost(&payloads, &mk, ep.seed).as_secs_f64() * 1e6 } else { 0.0 };
    let marker_sightings = taps
        .iter()
        .flat_map(|t| sim.read_tap(*t))
        .filter(|r| contains(&r.packet.payload, MARKER))
        .count();
    sim.run_until(start + span_us);
    let point = EncryptionPoint {
        size,
        encrypted,
        cross_traffic: cross,
        chunks: payloads.len(),
        delivered_intact,
        sim_delay_us,
        crypto_us,
        delay_us: sim_delay_us as f64 + crypto_us,
        marker_sightings,
    };
    Ok((point, sim))
}

fn key_pair(rng: &mut impl RngCore, key_id: u32) -> (KeyRecord, KeyRecord) {
    let mut key = vec![0u8; KEY_LEN];
    rng.fill_bytes(&mut key);
    let rec = |role| KeyRecord { flow: FlowMatch::any(), key: SecretKey::new(key.clone()), role, created_at: SimTime::ZERO, key_id };
    (rec(KeyRole::Encrypt), rec(KeyRole::Decrypt))
}

/// Best of three passes of encrypt + decrypt over every chunk.
fn crypto_cost(payloads: &[Vec<u8>], mk: &dyn Fn(Vec<u8>) -> Packet, seed: u64) -> Duration {
    let (enc, dec) = key_pair(&mut ChaCha8Rng::seed_from_u64(seed), 1);
    let pkts: Vec<Packet> = payloads.iter().map(|p| mk(p.clone())).collect();
    (0..3)
        .map(|_| {
            let t = Instant::now();
            for (i, p) in pkts.iter().enumerate() {
                let c = fe_encrypt(&enc, i as u64, p).expect("valid key");
                std::hint::black_box(fe_decrypt(&dec, &c).expect("own ciphertext"));
            }
            t.elapsed()
        })
        .min()
        .unwrap_or_default()
}

/// decrypt(encrypt(p)) == p over random keys, payloads and headers.
pub fn identity_failures(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    let mut failures = 0;
    for i in 0..trials {
        let key_id = rng.random();
        let (enc, dec) = key_pair(&mut rng, key_id);
        let mut payload = vec![0u8; rng.random_range(0..=2048)];
        rng.fill_bytes(&mut payload);
        let pkt = Packet::new(
            cssasim_core::net::MacAddr::from_u64(rng.random_range(0..1 << 48)),
            cssasim_core::net::MacAddr::from_u64(rng.random_range(0..1 << 48)),
            rng.random::<u32>().into(),
            rng.random::<u32>().into(),
            Proto::Udp,
            rng.random(),
            rng.random(),
            payload,
        );
        let ok = fe_encrypt(&enc, i as u64, &pkt)
            .and_then(|c| fe_decrypt(&dec, &c))
            .is_ok_and(|p| p == pkt);
        failures += usize::from(!ok);
    }
    failures
}
