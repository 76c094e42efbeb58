//! Network topology: switches, host attachments, and links, loaded from JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::net::{HostId, MacAddr, PortId, SwitchId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("topology JSON: {0}")]
    Json(String),
}

fn invalid(msg: impl Into<String>) -> TopologyError {
    TopologyError::Invalid(msg.into())
}

/// Security functions a switch can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Tv,
    Fe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SwitchEntry {
    Id(SwitchId),
    Detailed { id: SwitchId, caps: Vec<Capability> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostEntry {
    pub id: HostId,
    pub switch: SwitchId,
    pub port: PortId,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    #[serde(default)]
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEntry {
    pub a: SwitchId,
    pub b: SwitchId,
    pub latency_us: u64,
    pub bandwidth_mbps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_port: Option<PortId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_port: Option<PortId>,
}

/// On-disk topology document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub switches: Vec<SwitchEntry>,
    #[serde(default)]
    pub hosts: Vec<HostEntry>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub id: HostId,
    pub switch: SwitchId,
    pub port: PortId,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    pub role: String,
    pub domain: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: SwitchId,
    pub a_port: PortId,
    pub b: SwitchId,
    pub b_port: PortId,
    pub latency_us: u64,
    pub bandwidth_mbps: u64,
}

impl Link {
    /// Serialization delay in microseconds for `bytes` on this link, rounded up.
    /// A bandwidth of 0 means unlimited.
    pub fn serialization_us(&self, bytes: usize) -> u64 {
        if self.bandwidth_mbps == 0 {
            return 0;
        }
        // Mbps is bits per microsecond.
        (bytes as u64 * 8).div_ceil(self.bandwidth_mbps)
    }

    pub fn joins(&self, x: &SwitchId, y: &SwitchId) -> bool {
        (&self.a == x && &self.b == y) || (&self.a == y && &self.b == x)
    }
}

/// What sits on the far side of a switch port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PortPeer {
    Host(HostId),
    Link { link: usize, peer: SwitchId, peer_port: PortId },
}

/// Validated topology with every link port resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub switches: BTreeMap<SwitchId, BTreeSet<Capability>>,
    pub hosts: BTreeMap<HostId, Host>,
    pub links: Vec<Link>,
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let cfg: TopologyConfig =
            serde_json::from_str(text).map_err(|e| TopologyError::Json(e.to_string()))?;
        Self::from_config(cfg)
    }

    pub fn from_config(cfg: TopologyConfig) -> Result<Self, TopologyError> {
        let mut switches = BTreeMap::new();
        for s in cfg.switches {
            let (id, caps) = match s {
                SwitchEntry::Id(id) => (id, [Capability::Tv, Capability::Fe].into_iter().collect()),
                SwitchEntry::Detailed { id, caps } => (id, caps.into_iter().collect()),
            };
            if switches.insert(id.clone(), caps).is_some() {
                return Err(invalid(format!("duplicate switch {id}")));
            }
        }

        let mut used: BTreeSet<(SwitchId, PortId)> = BTreeSet::new();
        let mut hosts = BTreeMap::new();
        for h in cfg.hosts {
            if !switches.contains_key(&h.switch) {
                return Err(invalid(format!("host {} attaches to unknown switch {}", h.id, h.switch)));
            }
            if h.port.0 == 0 {
                return Err(invalid(format!("host {} uses reserved port 0", h.id)));
            }
            if !used.insert((h.switch.clone(), h.port)) {
                return Err(invalid(format!(
                    "duplicate attachment {}:{} (host {})",
                    h.switch, h.port, h.id
                )));
            }
            let domain = h.domain.unwrap_or_else(|| h.role.clone());
            let location = h.location.unwrap_or_else(|| h.switch.0.clone());
            let host = Host {
                id: h.id.clone(),
                switch: h.switch,
                port: h.port,
                mac: h.mac,
                ip: h.ip,
                role: h.role,
                domain,
                location,
            };
            if hosts.insert(h.id.clone(), host).is_some() {
                return Err(invalid(format!("duplicate host {}", h.id)));
            }
        }

        // explicit link ports claim first so auto-assignment never collides with them
        for l in &cfg.links {
            for (sw, port) in [(&l.a, l.a_port), (&l.b, l.b_port)] {
                if let Some(p) = port {
                    if !used.insert((sw.clone(), p)) {
                        return Err(invalid(format!("port {sw}:{p} used twice")));
                    }
                }
            }
        }

        let mut links = Vec::with_capacity(cfg.links.len());
        for l in cfg.links {
            for sw in [&l.a, &l.b] {
                if !switches.contains_key(sw) {
                    return Err(invalid(format!("link references unknown switch {sw}")));
                }
            }
            if l.a == l.b {
                return Err(invalid(format!("self-loop on {}", l.a)));
            }
            let a_port = match l.a_port {
                Some(p) => p,
                None => next_free(&mut used, &l.a),
            };
            let b_port = match l.b_port {
                Some(p) => p,
                None => next_free(&mut used, &l.b),
            };
            links.push(Link {
                a: l.a,
                a_port,
                b: l.b,
                b_port,
                latency_us: l.latency_us,
                bandwidth_mbps: l.bandwidth_mbps,
            });
        }

        Ok(Topology { switches, hosts, links })
    }

    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            switches: self
                .switches
                .iter()
                .map(|(id, caps)| SwitchEntry::Detailed { id: id.clone(), caps: caps.iter().copied().collect() })
                .collect(),
            hosts: self
                .hosts
                .values()
                .map(|h| HostEntry {
                    id: h.id.clone(),
                    switch: h.switch.clone(),
                    port: h.port,
                    mac: h.mac,
                    ip: h.ip,
                    role: h.role.clone(),
                    domain: Some(h.domain.clone()),
                    location: Some(h.location.clone()),
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkEntry {
                    a: l.a.clone(),
                    b: l.b.clone(),
                    latency_us: l.latency_us,
                    bandwidth_mbps: l.bandwidth_mbps,
                    a_port: Some(l.a_port),
                    b_port: Some(l.b_port),
                })
                .collect(),
        }
    }

    pub fn host(&self, id: &HostId) -> Option<&Host> {
        self.hosts.get(id)
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<&Host> {
        self.hosts.values().find(|h| h.ip == ip)
    }

    pub fn host_at(&self, sw: &SwitchId, port: PortId) -> Option<&Host> {
        self.hosts.values().find(|h| &h.switch == sw && h.port == port)
    }

    pub fn link_index(&self, x: &SwitchId, y: &SwitchId) -> Option<usize> {
        self.links.iter().position(|l| l.joins(x, y))
    }

    /// Peer for every occupied (switch, port).
    pub fn port_map(&self) -> BTreeMap<(SwitchId, PortId), PortPeer> {
        let mut map = BTreeMap::new();
        for h in self.hosts.values() {
            map.insert((h.switch.clone(), h.port), PortPeer::Host(h.id.clone()));
        }
        for (i, l) in self.links.iter().enumerate() {
            map.insert(
                (l.a.clone(), l.a_port),
                PortPeer::Link { link: i, peer: l.b.clone(), peer_port: l.b_port },
            );
            map.insert(
                (l.b.clone(), l.b_port),
                PortPeer::Link { link: i, peer: l.a.clone(), peer_port: l.a_port },
            );
        }
        map
    }

    pub fn ports_of(&self, sw: &SwitchId) -> Vec<PortId> {
        let mut ports: Vec<PortId> = self
            .hosts
            .values()
            .filter(|h| &h.switch == sw)
            .map(|h| h.port)
            .chain(self.links.iter().flat_map(|l| {
                let mut v = Vec::new();
                if &l.a == sw {
                    v.push(l.a_port);
                }
                if &l.b == sw {
                    v.push(l.b_port);
                }
                v
            }))
            .collect();
        ports.sort();
        ports
    }
}

fn next_free(used: &mut BTreeSet<(SwitchId, PortId)>, sw: &SwitchId) -> PortId {
    let mut p = 1u16;
    while used.contains(&(sw.clone(), PortId(p))) {
        p += 1;
    }
    used.insert((sw.clone(), PortId(p)));
    PortId(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "switches": ["SW1", {"id": "SW2", "caps": ["tv"]}],
        "hosts": [
            {"id": "h1", "switch": "SW1", "port": 1, "mac": "02:00:00:00:00:01", "ip": "10.0.0.1", "role": "plc"},
            {"id": "h2", "switch": "SW2", "port": 1, "mac": "02:00:00:00:00:02", "ip": "10.0.0.2", "role": "mtu", "domain": "control"}
        ],
        "links": [{"a": "SW1", "b": "SW2", "latency_us": 50, "bandwidth_mbps": 100}]
    }"#;

    #[test]
    fn loads_and_assigns_link_ports() {
        let t = Topology::from_json(SMALL).unwrap();
        assert_eq!(t.switches.len(), 2);
        assert_eq!(t.links[0].a_port, PortId(2));
        assert_eq!(t.links[0].b_port, PortId(2));
        assert_eq!(t.switches[&SwitchId::from("SW2")].len(), 1);
        assert_eq!(t.hosts[&HostId::from("h2")].domain, "control");
        assert_eq!(t.hosts[&HostId::from("h1")].domain, "plc");
        assert_eq!(t.hosts[&HostId::from("h1")].location, "SW1");
        let map = t.port_map();
        assert_eq!(map[&(SwitchId::from("SW1"), PortId(1))], PortPeer::Host(HostId::from("h1")));
    }

    #[test]
    fn degenerate_single_switch() {
        let t = Topology::from_json(
            r#"{"switches":["S"],"hosts":[{"id":"h","switch":"S","port":1,"mac":"02:00:00:00:00:01","ip":"10.0.0.1"}]}"#,
        )
        .unwrap();
        assert!(t.links.is_empty());
    }

    #[test]
    fn rejects_dangling_link() {
        let err = Topology::from_json(
            r#"{"switches":["S"],"links":[{"a":"S","b":"X","latency_us":1,"bandwidth_mbps":1}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::Invalid(m) if m.contains("unknown switch X")));
    }

    #[test]
    fn rejects_duplicate_attachment_and_self_loop() {
        let dup = r#"{"switches":["S"],"hosts":[
            {"id":"a","switch":"S","port":1,"mac":"02:00:00:00:00:01","ip":"10.0.0.1"},
            {"id":"b","switch":"S","port":1,"mac":"02:00:00:00:00:02","ip":"10.0.0.2"}]}"#;
        assert!(Topology::from_json(dup).is_err());
        let lp = r#"{"switches":["S"],"links":[{"a":"S","b":"S","latency_us":1,"bandwidth_mbps":1}]}"#;
        assert!(Topology::from_json(lp).is_err());
    }

    #[test]
    fn serialization_delay_rounds_up() {
        let l = Link {
            a: "A".into(),
            a_port: PortId(1),
            b: "B".into(),
            b_port: PortId(1),
            latency_us: 0,
            bandwidth_mbps: 100,
        };
        assert_eq!(l.serialization_us(0), 0);
        assert_eq!(l.serialization_us(1), 1);
        assert_eq!(l.serialization_us(1250), 100);
    }

    #[test]
    fn config_round_trip_is_stable() {
        let t = Topology::from_json(SMALL).unwrap();
        let again = Topology::from_config(t.to_config()).unwrap();
        assert_eq!(t, again);
    }
}
